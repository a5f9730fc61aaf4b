"""Path counting, importance-landscape prediction and landscape regularization for CNNs."""

from pathscape.archspec import NetworkSpec, load_spec, parse_spec, serialize_spec
from pathscape.kernels import BACKEND
from pathscape.lattice import count_paths_dp, enumerate_routes, path_field

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "NetworkSpec", "count_paths_dp", "enumerate_routes", "load_spec", "parse_spec", "path_field",
    "serialize_spec", "__version__",
]
