"""Builds the optional compiled kernel extension.

The package works without it (a numpy fallback is selected at import);
building it just makes the hot loops faster.  -ffp-contract=off keeps the
compiled results bit-identical to the fallback, which the test suite checks.
"""
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "lungroute._native",
        ["src/lungroute/_native.pyx"],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
