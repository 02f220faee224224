"""cagewarp: free-form deformation of voxel radiance fields with cages.

Pipeline: bake or load a voxel radiance field, build a cage around the
foreground, precompute cage coordinates on an n^3 lattice, then volume-render
the deformed scene by mapping ray samples back to the canonical field.
"""

from .geometry import (
    Aabb,
    CagePair,
    ScalarGrid,
    TriMesh,
    generate_cage,
    icosphere_mesh,
    box_mesh,
    interpolate_cage,
    is_watertight,
    load_cage,
    load_obj,
    marching_cubes,
    point_in_mesh,
    save_obj,
    winding_number,
)

__version__ = "0.1.0"

__all__ = [
    "Aabb",
    "CagePair",
    "ScalarGrid",
    "TriMesh",
    "box_mesh",
    "generate_cage",
    "icosphere_mesh",
    "interpolate_cage",
    "is_watertight",
    "load_cage",
    "load_obj",
    "marching_cubes",
    "point_in_mesh",
    "save_obj",
    "winding_number",
    "__version__",
]
