"""Low-rank functional tree tensor networks with Riemannian optimizers.

Core pieces: balanced binary tree tensor network models over per-mode
polynomial feature maps, a quotient-manifold geometry (horizontal projection,
QR retraction, transport), matrix-free Gauss-Newton curvature operators, and
a family of (natural) Riemannian gradient methods, plus dataset utilities and
experiment drivers behind the ``ftn`` command.

Submodules are imported lazily so that the command-line entry point can
configure threading environment variables before the numeric stack loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "cli",
    "data",
    "errors",
    "experiments",
    "features",
    "gauss_newton",
    "geometry",
    "kernels",
    "losses",
    "model",
    "optimizers",
    "reference",
    "sampling",
    "selftest",
    "topology",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
