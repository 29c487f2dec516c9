"""Gaussians-on-mesh avatar engine.

A skinned canonical avatar whose triangle faces each carry a local
gaussian; articulation is forward (kinematics + blend skinning), rendering
is tile-based gaussian splatting shaded by a normal-map-driven scale, and
fitting runs gradient descent through the whole differentiable pipeline.
"""

from .articulate import (
    EncodingConfig,
    MLPParams,
    NetworkBundle,
    articulate,
    articulate_positions,
    lbs,
    nr_deform,
    pos_encode,
    refine_pose,
    skin_only,
)
from .assets import (
    DataError,
    FormatError,
    frame_camera,
    load_avatar,
    load_camera,
    load_image,
    load_mask,
    load_pose,
    load_pose_sequence,
    make_test_rig,
    save_avatar,
    save_camera,
    save_image,
    save_pose,
    save_pose_sequence,
)
from .gaussians import (
    DegenerateFaceError,
    LocalFrame,
    WorldGaussian,
    face_gaussian,
    face_gaussians_t,
    steiner_frame,
)
from .model import (
    Face,
    GoMCanonical,
    JointTransforms,
    Pose,
    Rig,
    Vertex,
    forward_kinematics,
    subdivide,
    validate,
)
from .render import RenderOutput, composite_over_background, mode_image, render
from .shading import (
    NormalMap,
    ShadingMap,
    compose_final,
    raster_normals,
    shading_map,
    soft_silhouette,
)
from .splat import (
    Camera,
    Splat2D,
    Splats,
    project_gaussian,
    project_gaussians,
    rasterize,
    rasterize_reference,
)

__version__ = "0.1.0"
