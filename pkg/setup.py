"""Build script for the optional compiled CSR kernels.

The extension is a convenience, not a requirement: if Cython or a C
compiler is missing the install still succeeds and the package falls
back to the numpy kernels at import time.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "apgcn._kernels._spmm",
                ["src/apgcn/_kernels/_spmm.pyx"],
                include_dirs=[numpy.get_include()],
                # no -march/-ffast-math: keeps float results identical
                # to the numpy fallback (no FMA contraction)
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - degraded install path
    sys.stderr.write(f"apgcn: skipping compiled kernels ({exc}); "
                     "numpy fallback will be used\n")

setup(ext_modules=ext_modules)
