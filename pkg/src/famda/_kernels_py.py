"""Numpy reference versions of the hot kernels.

Every function here has a compiled twin in ``_kernels.pyx`` with the same
signature and bit-identical results; ``famda.kernels`` picks one at import.
"""
import numpy as np

_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def _shifted(arr, dy, dx):
    """Return (values, inside) of ``arr`` shifted by (dy, dx), zero outside."""
    h, w = arr.shape[:2]
    out = np.zeros_like(arr)
    inside = np.zeros((h, w), dtype=bool)
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    ys_src = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = arr[ys_src, xs_src]
    inside[ys, xs] = True
    return out, inside


def window_stats(img):
    """Per-pixel mean and std over the clipped 3x3 window, per channel."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    h, w, _ = img.shape
    total = np.zeros_like(img)
    count = np.zeros((h, w), dtype=np.float64)
    for dy, dx in _OFFSETS:
        vals, inside = _shifted(img, dy, dx)
        total += vals
        count += inside
    mean = total / count[:, :, None]
    sq = np.zeros_like(img)
    for dy, dx in _OFFSETS:
        vals, inside = _shifted(img, dy, dx)
        dev = np.where(inside[:, :, None], vals - mean, 0.0)
        sq += dev * dev
    std = np.sqrt(sq / count[:, :, None])
    return mean, std


def mask_runs(flat):
    """Runs of set pixels in a flattened mask as an (k, 2) array of (start, length)."""
    flat = np.asarray(flat, dtype=bool).ravel()
    padded = np.concatenate(([False], flat, [False])).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    starts = edges[0::2]
    lengths = edges[1::2] - starts
    return np.stack([starts, lengths], axis=1).astype(np.int64)


def vote_refine(labels, probs, mask_indices, ignore):
    """Plurality vote of ``labels`` inside each mask, written into a copy.

    ``mask_indices`` is a sequence of ascending flat pixel-index arrays, already
    in processing order. Votes always read the original ``labels``.
    """
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    num_classes = probs.shape[1]
    out = labels.copy()
    for idx in mask_indices:
        idx = np.asarray(idx, dtype=np.int64)
        votes = labels[idx]
        keep = votes != ignore
        if not keep.any():
            continue
        idx = idx[keep]
        counts = np.bincount(votes[keep], minlength=num_classes)
        best = counts.max()
        tied = np.flatnonzero(counts == best)
        if len(tied) == 1:
            winner = tied[0]
        else:
            mass = np.cumsum(probs[idx], axis=0)[-1]
            tied_mass = mass[tied]
            winner = tied[np.flatnonzero(tied_mass == tied_mass.max())[0]]
        out[idx] = winner
    return out
