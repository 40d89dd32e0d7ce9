"""LiDAR obstacle detection against a known occupancy map.

Stages: voxel-grid reduction, RANSAC floor removal, map filtration, Euclidean
clustering over a KD-tree, and minimal-area oriented boxes fed back into the map.
"""

from .cluster import (ClusterParams, KdTree, ObbParams, build_kdtree, euclidean_cluster, fit_obb,
                      min_area_rect_calipers, radius_search)
from .core import Detection, Plane, Point3, PointCloud, RigidTransform, compose, transform_cloud
from .errors import *  # noqa: F401,F403
from .mapping import (CellState, OccupancyGrid, build_local_map, footprint_mask, mark_detections,
                      reset)
from .pcio import (DetectionRecord, MapMetadata, load_map_file, load_pcd, read_detections, read_pcd,
                   save_map_file, save_pcd, write_detections, write_pcd)
from .pipeline import PipelineConfig, bench, load_config, run_pipeline
from .preprocess import (OutOfBoundsPolicy, RansacParams, VoxelParams, filter_by_map, fit_floor_ransac,
                         remove_floor, voxel_downsample)
from .render import render_topdown
from .scene import SceneSpec, gen_scene

__version__ = "0.1.0"
