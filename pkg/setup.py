"""Build script: compiles the optional fast kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so compilation failures are downgraded to a
warning instead of aborting the install.
"""

import warnings

from setuptools import setup
from setuptools.command.build_ext import build_ext


def _extensions():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools.extension import Extension
    except ImportError:
        return []
    ext = Extension(
        "ssal._kernels._ck",
        sources=["src/ssal/_kernels/_ck.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


class OptionalBuildExt(build_ext):
    """Treat extension build failures as non-fatal."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            warnings.warn(f"fast kernel extension not built ({exc}); "
                          "falling back to pure numpy kernels")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"failed to compile {ext.name} ({exc}); "
                          "falling back to pure numpy kernels")


setup(ext_modules=_extensions(), cmdclass={"build_ext": OptionalBuildExt})
