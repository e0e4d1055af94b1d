"""uvgsplat: animatable avatars from mesh-guided gaussian textures.

A self-contained CPU implementation: a numpy reverse-mode autodiff engine,
linear blend skinning on a procedural template body, UV-space position maps,
small U-Nets predicting a pose-dependent mesh refinement and per-texel
gaussian attributes, a tiled differentiable gaussian splatter, and a
synthetic multi-view dataset generator with a classical mesh-rendering
oracle for ground truth.
"""

from .tensor import Tensor, constant, grad_check, set_default_dtype
from .body import (TemplateBody, Pose, make_template, forward_kinematics,
                   lbs, lbs_numpy, save_body, load_body)
from .uvmap import (build_atlas, rasterize_vertex_layer, rasterize_position_map,
                    sample_uv, gather_masked, texels_to_points,
                    save_layer, load_layer)
from .nets import (make_unet, unet_forward, predict_offset_map,
                   predict_gaussian_textures, save_checkpoint, load_checkpoint)
from .splat import (Camera, GaussianCloud, build_covariance, project,
                    rasterize, rasterize_backward, rasterize_reference,
                    render_gaussians)
from .loss import (LossWeights, mesh_loss, image_loss, gaussian_reg,
                   total_loss, ssim, psnr_metric, ssim_metric, metrics)
from .synth import (SceneConfig, SyntheticScene, make_scene,
                    render_mesh_oracle, raycast_reference,
                    save_dataset, load_dataset, average_texture)
from .pipeline import (PipelineConfig, make_nets, refine_mesh, forward_render,
                       train, evaluate, run_ablation, Adam)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "constant", "grad_check", "set_default_dtype",
    "TemplateBody", "Pose", "make_template", "forward_kinematics",
    "lbs", "lbs_numpy", "save_body", "load_body",
    "build_atlas", "rasterize_vertex_layer", "rasterize_position_map",
    "sample_uv", "gather_masked", "texels_to_points", "save_layer", "load_layer",
    "make_unet", "unet_forward", "predict_offset_map",
    "predict_gaussian_textures", "save_checkpoint", "load_checkpoint",
    "Camera", "GaussianCloud", "build_covariance", "project",
    "rasterize", "rasterize_backward", "rasterize_reference", "render_gaussians",
    "LossWeights", "mesh_loss", "image_loss", "gaussian_reg", "total_loss",
    "ssim", "psnr_metric", "ssim_metric", "metrics",
    "SceneConfig", "SyntheticScene", "make_scene", "render_mesh_oracle",
    "raycast_reference", "save_dataset", "load_dataset", "average_texture",
    "PipelineConfig", "make_nets", "refine_mesh", "forward_render",
    "train", "evaluate", "run_ablation", "Adam",
]
