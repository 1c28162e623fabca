"""Build script for the optional compiled kernel extension.

The package works without the extension; ``mtldiff._backend`` falls back to
the numpy kernels when ``mtldiff._core`` is missing.  The Extension is marked
``optional`` so a failed compile degrades to the pure-Python install instead
of aborting it.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "mtldiff._core",
                ["src/mtldiff/_core.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)
