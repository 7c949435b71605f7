"""Build script for the optional compiled kernels.

The package is pure Python plus one Cython extension holding the hot
inner loops (polyline distances, mean-shift).  If Cython or a C compiler
is unavailable the build silently falls back to the numpy reference
implementations selected at import time by lanetiles._kernels.
"""

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    extensions = cythonize(
        [
            Extension(
                "lanetiles._kernels._native",
                sources=["src/lanetiles/_kernels/_native.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
