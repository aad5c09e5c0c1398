import numpy
from setuptools import Extension, setup

setup(
    ext_modules=[
        Extension(
            "poseloop._kernels",
            sources=["src/poseloop/_kernels.c"],
            include_dirs=[numpy.get_include()],
            extra_compile_args=["-O3", "-march=native", "-ffast-math", "-funroll-loops"],
            optional=True,  # the package falls back to the numpy engine
        )
    ]
)
