import os
import platform
import sys

from Cython.Build import cythonize
from setuptools import Extension, setup

compile_args = ["-O3", "-fno-math-errno", "-fno-trapping-math", "-fopenmp-simd"]
link_args = []
macros = []
if os.environ.get("VAEGUARD_PORTABLE", "") in ("", "0"):
    compile_args.append("-march=native")
# glibc ships vector tanh/exp/log1p (libmvec) on x86-64 Linux
if sys.platform.startswith("linux") and platform.machine() == "x86_64":
    macros.append(("VAEGUARD_LIBMVEC", "1"))
    link_args.append("-lmvec")

extensions = [
    Extension(
        "vaeguard.kernels._core",
        ["src/vaeguard/kernels/_core.pyx"],
        include_dirs=["src/vaeguard/kernels"],
        define_macros=macros,
        extra_compile_args=compile_args,
        extra_link_args=link_args,
        optional=True,
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
