import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("POLAR_DENOISE_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "polar_denoise._core",
                    ["src/polar_denoise/_core.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # No Cython available: ship the pure-Python backend only.
        ext_modules = []

setup(ext_modules=ext_modules)
