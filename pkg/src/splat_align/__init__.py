"""Pixel-aligned 4D Gaussian splatting on a NumPy software renderer."""
from .config import FocalConfig, LearningRates, LossWeights, RunConfig
from .deform import DeformationField, FieldGrads, deform, deform_backward, load_field, positional_encoding, save_field
from .errors import (IngestionError, InvalidParameterError, NumericOverflowError, OracleUnavailableError,
                     SplatAlignError)
from .estimators import FocalAligner, PixelAligned4D
from .focal import FocalSweepConfig, SweepResult, jitter_focal, sweep_focal
from .guidance import (DenoiserOracle, MockTargetOracle, RemoteOracle, add_noise, combined_sds, distill_image,
                       mv_refine_loss, remote_oracle, sds_gradient, time_refine_loss)
from .io import export_ply, read_frames, read_obj, read_ply, read_png, write_obj, write_ply, write_png
from .losses import (FeatureStack, LossValue, geometry_alignment, mask_loss, motion_alignment, mse_loss,
                     perceptual_loss, texture_alignment)
from .optim import OptimizerState, adam_step
from .pipeline import (StageReport, dynamic_stage, ingest_anchor, ingest_meshes, init_gaussians, render_sequence,
                       resolve_focals, static_stage)
from .render import RenderGrads, Splat2D, project_gaussian, render, render_backward, render_mesh
from .scene import (Camera, DiffusionSchedule, GaussianCloud, ImageBuffer, TriMesh, VideoClip, Violation,
                    check_cloud, covariance_of, validate_cloud)
from .synth import SyntheticAnchor, synth_anchor

__version__ = "0.1.0"
