import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the numpy fallback kernels are used instead
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "evtlab._kernels._ckernels",
                ["src/evtlab/_kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                # no FMA contraction: sums must match the numpy fallback bitwise
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
