import os

from setuptools import setup

ext_modules = []
if os.environ.get("FEDSEG_PURE_PYTHON") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "fedseg._fhcore",
                    ["src/fedseg/_fhcore.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # Cython/numpy unavailable at build time: the pure-Python kernels are used
        ext_modules = []

setup(ext_modules=ext_modules)
