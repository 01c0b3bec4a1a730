import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from fixtures import fixture_image, fixture_masks, fixture_model
from make_goldens import train_step_fixture

import famda.augment
from famda import selftrain, synthworld
from famda.augment import Rng, apply_window, crop_window
from famda.dataset import load_dataset
from famda.gridcore import IGNORE, Image
from famda.maskcache import MaskSet
from famda.model import MultiTaskModel, TrainConfig, extract_features
from famda.selftrain import (
    Teacher,
    ema_scope,
    ema_update,
    make_pseudo_label,
    source_only_baseline,
    train_loop,
    train_step,
)

DATA = Path(__file__).parent / "data"
GOLDEN = np.load(DATA / "goldens.npz")


def test_ema_examples():
    assert np.allclose(ema_update(np.array([1.0, 2.0]), np.array([3.0, 4.0]), 0.9), [1.2, 2.2], atol=1e-15)
    t = np.array([0.3, -1.0])
    assert np.array_equal(ema_update(t, np.array([5.0, 5.0]), 1.0), t)
    for alpha in (0.1, 0.5, 0.999):
        assert np.array_equal(ema_update(t, t, alpha), t)
    for alpha in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            ema_update(t, t, alpha)


def test_ema_matches_formula_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(100):
        t, s, a = rng.normal(size=50), rng.normal(size=50), rng.uniform(1e-6, 1)
        assert np.max(np.abs(ema_update(t, s, a) - (a * t + (1 - a) * s))) <= 1e-12


def test_ema_converges_geometrically():
    t0, s, a = np.array([1.0, -2.0]), np.array([4.0, 0.5]), 0.8
    t = t0
    for n in range(1, 30):
        t = ema_update(t, s, a)
        assert np.allclose(t, s + a**n * (t0 - s), atol=1e-12)


def test_ema_scope_excludes_depth_head():
    model = MultiTaskModel(5)
    tracked, frozen = ema_scope(model)
    assert tracked.size == model.sizes["shared"] + model.sizes["seg_head"]
    assert np.array_equal(frozen, np.arange(model.params.size)[model.block("depth_head")])
    teacher = Teacher.from_student(fixture_model())
    assert teacher.params.size == 192


def test_teacher_alpha_one_is_frozen():
    student = fixture_model()
    teacher = Teacher.from_student(student)
    init = teacher.params.copy()
    for k in range(10):
        teacher.update(MultiTaskModel(5, Rng(k).uniform_array(204)), 1.0)
    assert np.array_equal(teacher.params, init)


def test_pseudo_label_quality_extremes():
    teacher = Teacher.from_student(fixture_model())
    feats = extract_features(fixture_image())
    assert make_pseudo_label(teacher, feats, None, 0.0)[1] == 1.0
    assert make_pseudo_label(teacher, feats, None, 1.0)[1] == 0.0


def test_pseudo_label_golden():
    teacher = Teacher.from_student(fixture_model())
    labels, q, raw = make_pseudo_label(teacher, extract_features(fixture_image()), fixture_masks(), 0.21)
    assert np.array_equal(labels.data, GOLDEN["pseudo_labels"])
    assert np.array_equal(raw.data, GOLDEN["pseudo_raw"])
    assert q == float(GOLDEN["pseudo_q"])


def test_pseudo_label_refine_switch():
    teacher = Teacher.from_student(fixture_model())
    feats = extract_features(fixture_image())
    labels, _, raw = make_pseudo_label(teacher, feats, fixture_masks(), 0.21, refine=False)
    assert np.array_equal(labels.data, raw.data)


# ---- train_step ------------------------------------------------------------


def _norm(v):
    s = sorted(v)
    n = len(s)
    med = s[n // 2] if n % 2 else (s[n // 2 - 1] + s[n // 2]) / 2
    mad = sum(abs(x - med) for x in s) / n
    return np.array([0.0] * n if mad < 1e-8 else [(x - med) / mad for x in v])


def _forward(params, feats, c):
    f = feats.shape[-1]
    sw = params[: f * f].reshape(f, f)
    sb = params[f * f: f * f + f]
    o = f * f + f
    cw = params[o: o + c * f].reshape(c, f)
    cb = params[o + c * f: o + c * f + c]
    o += c * f + c
    dw, db = params[o: o + f], params[o + f]
    h = np.tanh(np.einsum("ij,hwj->hwi", sw, feats) + sb)
    z = np.einsum("ij,hwj->hwi", cw, h) + cb
    p = np.exp(z - z.max(-1, keepdims=True))
    return p / p.sum(-1, keepdims=True), np.einsum("j,hwj->hw", dw, h) + db


def _ce(probs, labels, weights):
    scored = labels != IGNORE
    total = 0.0
    for r, c in zip(*np.nonzero(scored)):
        total += weights[r, c] * -math.log(probs[r, c, labels[r, c]])
    return total / scored.sum()


def _window(rng, shape, crop, *arrays):
    top, left, flip = crop_window(shape, crop, rng)
    return [apply_window(a, top, left, crop, flip) for a in arrays]


def _jitter(img, rng, s):
    u = rng.uniform_array(6)
    return np.clip(img * (1 + 0.4 * s * (2 * u[:3] - 1)) + 0.2 * s * (2 * u[3:] - 1), 0, 1)


def independent_train_step_losses(student, teacher, src, tgt, cfg, rng):
    """Straight-line recomputation of the three losses of one step."""
    c = student.num_classes
    teacher_full = np.zeros(student.params.size)
    teacher_full[teacher.tracked] = teacher.params
    l_s = l_t = l_d = q_sum = 0.0
    for b, (s, t) in enumerate(zip(src, tgt)):
        r = rng.fork(b)
        s_img, s_lab = _window(r.fork(0).fork(0), s.image.shape, cfg.crop, s.image.data, s.labels.data)
        s_jit = _jitter(s_img, r.fork(1), cfg.jitter)
        probs, _ = _forward(student.params, extract_features(Image(s_jit)), c)
        l_s += _ce(probs, s_lab, np.ones(s_lab.shape)) / len(src)

        t_probs, _ = _forward(teacher_full, extract_features(t.image), c)
        q = float(np.mean(t_probs.max(-1) >= cfg.quality_tau))
        hard = t_probs.argmax(-1)
        refined = hard.copy()
        order = sorted(range(len(t.masks.masks)), key=lambda i: (-int(t.masks.masks[i].sum()), i))
        for i in order:
            m = t.masks.masks[i]
            counts = np.bincount(hard[m], minlength=c)
            tied = np.flatnonzero(counts == counts.max())
            if len(tied) > 1:
                mass = t_probs[m].sum(0)[tied]
                tied = tied[mass == mass.max()]
            refined[m] = tied[0]
        q_sum += q / len(tgt)

        t_img, t_lab, t_dep, t_val = _window(r.fork(2).fork(0), t.image.shape, cfg.crop, t.image.data, refined,
                                             t.pseudo_depth.data, t.pseudo_depth.valid)
        d_img = _jitter(t_img, r.fork(3), cfg.jitter)
        _, d_pred = _forward(student.params, extract_features(Image(d_img)), c)

        present = sorted(set(np.unique(s_lab).tolist()) - {IGNORE})
        mr = r.fork(4)
        pool = list(present)
        k = math.ceil(len(pool) / 2)
        for i in range(k):
            j = i + mr.below(len(pool) - i)
            pool[i], pool[j] = pool[j], pool[i]
        paste = np.isin(s_lab, pool[:k])
        mixed = np.where(paste[..., None], s_img, t_img)
        mixed_lab = np.where(paste, s_lab, t_lab)
        mixed = _jitter(mixed, r.fork(6), cfg.jitter)
        m_probs, _ = _forward(student.params, extract_features(Image(mixed)), c)
        l_t += _ce(m_probs, mixed_lab, np.where(paste, 1.0, q)) / len(tgt)

        a, bq = d_pred[t_val], t_dep[t_val]
        diff = _norm(list(a)) - _norm(list(bq))
        l_d += math.sqrt(float(np.mean(diff**2))) / len(tgt)
    return {"l_ce_s": l_s, "l_ce_t": l_t, "l_rmse_t": l_d, "q_mean": q_sum,
            "total": l_s + l_t + cfg.beta * l_d}


def test_train_step_golden_and_independent_recomputation():
    student, teacher, src, tgt, cfg = train_step_fixture()
    oracle = independent_train_step_losses(student, teacher, src, tgt, cfg, Rng(7))
    _, _, parts = train_step(student, teacher, src, tgt, cfg, Rng(7))
    golden = json.loads((DATA / "train_step_seed7.json").read_text())
    assert set(parts) == set(golden) == set(oracle)
    for k in golden:
        assert parts[k] == pytest.approx(golden[k], rel=1e-12, abs=1e-14)
        assert parts[k] == pytest.approx(oracle[k], rel=1e-9, abs=1e-12)
    assert 0 < parts["q_mean"] < 1


def test_train_step_zero_lr():
    student, teacher, src, tgt, cfg = train_step_fixture()
    cfg.lr = 0.0  # bypasses the constructor check on purpose
    before_s, before_t = student.params.copy(), teacher.params.copy()
    new_s, new_t, parts = train_step(student, teacher, src, tgt, cfg, Rng(7))
    assert np.array_equal(new_s.params, before_s)
    expected = cfg.alpha * before_t + (1 - cfg.alpha) * before_s[new_t.tracked]
    assert np.allclose(new_t.params, expected, rtol=0, atol=1e-15)
    assert all(math.isfinite(v) for v in parts.values())


def test_train_step_beta_zero_freezes_depth_head():
    student, teacher, src, tgt, cfg = train_step_fixture()
    cfg = replace(cfg, beta=0.0)
    new_s, _, parts = train_step(student, teacher, src, tgt, cfg, Rng(7))
    blk = student.block("depth_head")
    assert np.array_equal(new_s.params[blk], student.params[blk])
    assert parts["total"] == pytest.approx(parts["l_ce_s"] + parts["l_ce_t"], abs=1e-15)
    assert parts["l_rmse_t"] > 0


def test_train_step_teacher_only_changes_by_ema():
    student, teacher, src, tgt, cfg = train_step_fixture()
    before_t = teacher.params.copy()
    new_s, new_t, _ = train_step(student, teacher, src, tgt, cfg, Rng(7))
    assert np.allclose(new_t.params, cfg.alpha * before_t + (1 - cfg.alpha) * new_s.params[new_t.tracked],
                       atol=1e-15)


def test_train_step_errors():
    student, teacher, src, tgt, cfg = train_step_fixture()
    with pytest.raises(ValueError, match="empty batch"):
        train_step(student, teacher, [], tgt, cfg, Rng(0))
    tgt[1].pseudo_depth = None
    with pytest.raises(ValueError, match="t1"):
        train_step(student, teacher, src, tgt, cfg, Rng(0))


def test_class_mix_never_reaches_depth(monkeypatch):
    """Taint every array derived from a class-mixed image and watch the depth loss."""
    tainted = set()
    orig_mix, orig_jit = famda.augment.class_mix, famda.augment.photometric_jitter
    orig_feat, orig_fwd = selftrain.extract_features, selftrain.forward_activations
    orig_obj = selftrain._depth_objective
    seen = {"mix": 0, "depth": 0}

    def mix(*a, **k):
        out = orig_mix(*a, **k)
        tainted.add(id(out[0]))
        seen["mix"] += 1
        return out

    def jit(img, *a, **k):
        out = orig_jit(img, *a, **k)
        if id(img) in tainted:
            tainted.add(id(out))
        return out

    def feat(img):
        out = orig_feat(img)
        if id(img) in tainted:
            tainted.add(id(out))
        return out

    def fwd(model, feats):
        act = orig_fwd(model, feats)
        if id(feats) in tainted:
            tainted.add(id(act.depth))
        return act

    def objective(cfg):
        fn = orig_obj(cfg)

        def wrapped(pred, pseudo):
            seen["depth"] += 1
            assert id(pred.data) not in tainted, "depth loss consumed a class-mixed image"
            return fn(pred, pseudo)
        return wrapped

    monkeypatch.setattr(famda.augment, "class_mix", mix)
    monkeypatch.setattr(famda.augment, "photometric_jitter", jit)
    monkeypatch.setattr(selftrain, "extract_features", feat)
    monkeypatch.setattr(selftrain, "forward_activations", fwd)
    monkeypatch.setattr(selftrain, "_depth_objective", objective)
    student, teacher, src, tgt, cfg = train_step_fixture()
    train_step(student, teacher, src, tgt, cfg, Rng(7))
    assert seen == {"mix": 2, "depth": 2}
    assert len(tainted) >= 6


# ---- train_loop --------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    synthworld.generate_dataset(root / "source", 6, seed=1)
    synthworld.generate_dataset(root / "target", 6, shift=synthworld.ShiftSpec(strength=0.6), seed=2)
    source = load_dataset(root / "source", labels=True)
    target = load_dataset(root / "target", masks=True, pseudo_depth=True)
    evals = load_dataset(root / "target", labels=True, depth=True, masks=True)
    return source, target, evals


def small_cfg(**kw):
    base = dict(iters=12, warmup=4, batch=1, crop=48, log_every=4, eval_every=8, eval_images=3)
    base.update(kw)
    return TrainConfig(**base)


def test_loop_zero_iters_returns_init(tiny):
    source, target, _ = tiny
    model, trace = train_loop(source, target, small_cfg(iters=0))
    assert np.array_equal(model.params, MultiTaskModel.init(5, Rng.derive(0, 0)).params)
    assert [r["step"] for r in trace] == [0]


def test_loop_is_deterministic(tiny):
    source, target, evals = tiny
    m1, t1 = train_loop(source, target, small_cfg(), eval_set=evals)
    m2, t2 = train_loop(source, target, small_cfg(), eval_set=evals)
    assert json.dumps(t1) == json.dumps(t2)
    assert np.array_equal(m1.params, m2.params)
    m3, _ = train_loop(source, target, small_cfg(seed=1), eval_set=evals)
    assert not np.array_equal(m1.params, m3.params)


def test_loop_trace_schema(tiny):
    source, target, evals = tiny
    _, trace = train_loop(source, target, small_cfg(), eval_set=evals)
    assert [r["step"] for r in trace] == [0, 4, 8, 12]
    assert "miou" in trace[0] and "l_ce_s" not in trace[0]
    assert set(trace[1]) == {"step", "l_ce_s", "total"}
    for rec in trace[2:]:
        assert {"l_ce_s", "l_ce_t", "l_rmse_t", "q_mean", "total", "pl_acc_raw", "pl_acc_refined"} <= set(rec)
    assert "miou" in trace[2] and "rmse_m" in trace[3]


def test_source_only_matches_disabled_target_losses(tiny):
    source, target, _ = tiny
    m1, t1 = source_only_baseline(source, target, small_cfg())
    m2, t2 = train_loop(source, target, small_cfg(source_only=True))
    assert np.array_equal(m1.params, m2.params) and t1 == t2
    assert all("l_ce_t" not in r for r in t1)


def test_loop_never_reads_source_depth(tiny):
    source, target, _ = tiny
    assert source.depth is None and source.pseudo_depth is None
    train_loop(source, target, small_cfg(iters=6))


def test_loop_requires_target_caches(tiny):
    source, _, evals = tiny
    bare = load_dataset(evals.root)
    with pytest.raises(ValueError, match="mask caches"):
        train_loop(source, bare, small_cfg())


def test_pl_accuracy_uses_masks(tiny):
    _, _, evals = tiny
    teacher = Teacher.from_student(fixture_model())
    raw, ref = selftrain.pseudo_label_accuracy(teacher, evals, range(3), 0.9)
    assert 0 <= raw <= 1 and 0 <= ref <= 1
    empty = replace(evals, masks=[MaskSet(64, 64, [])] * len(evals))
    raw2, ref2 = selftrain.pseudo_label_accuracy(teacher, empty, range(3), 0.9)
    assert raw2 == ref2 == raw
