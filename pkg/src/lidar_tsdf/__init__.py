"""Surface reconstruction from single-viewpoint Lidar scans.

Points are binned into a voxel grid of Gaussian statistics, local planes are
fitted over multi-scale vertex neighborhoods, and the resulting truncated
signed distance field is meshed with marching cubes.
"""

__version__ = "0.1.0"

from .geometry import PlaneEstimate, eigen3_symmetric, fit_plane
from .grid import NeighborhoodStats, StatGrid, VoxelStats, merge_stats
from .mesher import TriangleMesh, marching_cubes
from .tsdf import Mode, ReconstructionConfig, TsdfField, compute_tsdf, gaussian_confidence, select_level

__all__ = [
    "NeighborhoodStats", "StatGrid", "VoxelStats", "merge_stats",
    "PlaneEstimate", "eigen3_symmetric", "fit_plane",
    "Mode", "ReconstructionConfig", "TsdfField", "compute_tsdf", "gaussian_confidence", "select_level",
    "TriangleMesh", "marching_cubes",
]
