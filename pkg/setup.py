"""Build the optional compiled kernels.

The package works without them: ``qsnn.backend`` falls back to the numpy
implementation when ``qsnn._core`` cannot be imported.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("QSNN_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "qsnn._core",
                    ["src/qsnn/_core.pyx"],
                    include_dirs=[np.get_include()],
                    # no fast-math / contraction: the compensated membrane
                    # update depends on exact IEEE rounding of each op
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
