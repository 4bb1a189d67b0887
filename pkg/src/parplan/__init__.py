"""Parallelization planner and execution simulator for distributed training."""
from .cluster import Cluster, DeviceSpec, load_cluster, parse_cluster
from .document import load_plan, plan_from_document, plan_to_document
from .errors import InfeasibleError, InputError, ParplanError, PlanningError
from .model_ir import CompGraph, load_model, parse_model
from .planner import build_plan
from .schedule_sim import build_pipeline_schedule, simulate

__version__ = "0.1.0"
