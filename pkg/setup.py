import os

from setuptools import setup

ext_modules = []
if os.environ.get("SCMD_SKIP_COMPILED") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "scmd._kernels._core",
                    ["src/scmd/_kernels/_core.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        # No Cython/numpy at build time: install with the pure-python kernels only.
        ext_modules = []

setup(ext_modules=ext_modules)
