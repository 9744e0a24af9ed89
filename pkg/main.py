import sys
from pathlib import Path

_HERE = Path(__file__).resolve().parent

# ── Package bootstrap ────────────────────────────────────────────────────────
# The checkout folder name is not necessarily a valid Python identifier, so
# when this script is run directly (__package__ is None / "") we register the
# folder as the "trafficgan" package in sys.modules. Every module inside uses
# relative imports (`from .something import ...`).
if __package__ in (None, ""):
    import importlib.util as _ilu

    _spec = _ilu.spec_from_file_location(
        "trafficgan",
        str(_HERE / "__init__.py"),
        submodule_search_locations=[str(_HERE)],
    )
    _pkg = _ilu.module_from_spec(_spec)
    _pkg.__path__ = [str(_HERE)]          # type: ignore[attr-defined]
    _pkg.__package__ = "trafficgan"       # type: ignore[attr-defined]
    sys.modules["trafficgan"] = _pkg
    _spec.loader.exec_module(_pkg)        # type: ignore[union-attr]

    from trafficgan.cli import dispatch
else:
    from .cli import dispatch


def run(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    raise SystemExit(run())
