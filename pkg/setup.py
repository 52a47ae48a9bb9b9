"""Builds the optional compiled kernel extension.

The package is fully functional without it (pure NumPy fallback is selected
at import time); the extension only accelerates the conv/matmul inner loops.
-ffp-contract=off keeps the float32 path bit-identical to the reference
kernels (no FMA contraction).
"""

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "rangeguard.engine._kernels",
        ["src/rangeguard/engine/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
)
