import os

import numpy as np
from setuptools import Extension, setup

# FAMDA_NO_EXT=1 skips the compiled kernels; the package then runs on its
# numpy fallback.
ext_modules = []
if not os.environ.get("FAMDA_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "famda._kernels",
                ["src/famda/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
