from .geometry import (
    CameraView,
    DegenerateQuaternion,
    GaussianPrimitive,
    GaussianScene,
    InvalidCamera,
    covariance_from_params,
    intrinsics_matrix,
    look_at,
    num_sh_coeffs,
    quat_to_rotmat,
    rigid_transform_camera,
    rigid_transform_scene,
    rotmat_to_quat,
)
from .io import FormatError, load_scene, read_camera_list, read_ppm, save_scene, write_camera_list, write_ppm
from .sh import C0, UnsupportedDegree, evaluate_sh, rgb_to_sh0, sh_basis, sh_basis_jacobian

__all__ = [
    "C0",
    "CameraView",
    "DegenerateQuaternion",
    "FormatError",
    "GaussianPrimitive",
    "GaussianScene",
    "InvalidCamera",
    "UnsupportedDegree",
    "covariance_from_params",
    "evaluate_sh",
    "intrinsics_matrix",
    "load_scene",
    "look_at",
    "num_sh_coeffs",
    "quat_to_rotmat",
    "read_camera_list",
    "read_ppm",
    "rgb_to_sh0",
    "rigid_transform_camera",
    "rigid_transform_scene",
    "rotmat_to_quat",
    "save_scene",
    "sh_basis",
    "sh_basis_jacobian",
    "write_camera_list",
    "write_ppm",
]
