"""Group-wise keypoint prediction-verification networks with inference-time
search refinement of low-confidence terminal keypoints."""

__version__ = "0.1.0"

__all__ = [
    "heatmap",
    "skeleton",
    "synth",
    "convops",
    "net",
    "training",
    "refine",
    "metrics",
    "tensorio",
    "errors",
]


def __getattr__(name):
    # submodules import lazily so the CLI can pin BLAS thread env vars
    # before numpy loads
    if name in __all__:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
