"""Plan-driven 4D Gaussian scenes with learned object transitions."""

__version__ = "0.1.0"

from .gate import GateMode, counter_uniform, gate_infer, gate_train
from .kinematics import Pose, object_pose, rotation_matrix, transform_cloud, transform_point
from .pipeline import CloudParams, DynamicsModel, evaluate_scene, render_sequence
from .plan import (PlanDocument, PlanError, TimelineProgram, ValidationReport, compile_timeline,
                   parse_plan, validate_plan)
from .render import Camera, FrameBatch, eval_field_image, project, render_frame
from .scene import (GaussianCloud, GaussianPoint, SceneSnapshot, covariance_of, eval_field, export_ply,
                    import_ply, make_primitive)
from .train import TrainConfig, TrainState, reconstruction_guidance, train_dynamics, train_refine
