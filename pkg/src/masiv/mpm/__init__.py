from .backend import HAVE_COMPILED, backend_name, get_num_threads, set_num_threads
from .sim import MaterialLaws, rollout, step
from .weights import bspline_weights

__all__ = [
    "HAVE_COMPILED", "backend_name", "set_num_threads", "get_num_threads",
    "MaterialLaws", "step", "rollout", "bspline_weights",
]
