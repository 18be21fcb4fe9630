"""Build the optional compiled kernel core.

The extension is a performance backend only: if Cython or a C compiler is
missing the install still succeeds and the package falls back to the pure
numpy kernels (twotower._kernels_py), which are bitwise-equivalent.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Swallow compiler failures; the package works without the extension."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            print(f"warning: compiled kernels skipped ({exc}); using pure-python fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            print(f"warning: building {ext.name} failed ({exc}); using pure-python fallback")


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "twotower._kernels",
        ["src/twotower/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        # -ffp-contract=off: no FMA contraction, so the C loops produce the
        # exact same IEEE-754 double sequence as the numpy fallback.
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
