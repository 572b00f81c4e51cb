"""Dual-pooling attention for vehicle re-identification on a small numpy autodiff engine."""
from .attention import CpaModule, DpaModule, Fusion, ObrBlock, SpaModule
from .config import RunConfig, load_config, parse_config
from .data import SynthSpec, load_manifest, synth_generate
from .estimator import DpaReIdentifier
from .evaluation import EvalReport, distance_matrix, evaluate
from .losses import HmtParams, LossWeights, LsceParams, hmt_loss, lsce_loss, total_loss
from .model import BackboneConfig, ReIdModel, build_model
from .pooling import GemParams, PoolAxis, SoftMode, avg_pool, gem_pool, max_pool, min_pool, soft_pool

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig", "CpaModule", "DpaModule", "DpaReIdentifier", "EvalReport", "Fusion", "GemParams",
    "HmtParams", "LossWeights", "LsceParams", "ObrBlock", "PoolAxis", "ReIdModel", "RunConfig",
    "SoftMode", "SpaModule", "SynthSpec", "avg_pool", "build_model", "distance_matrix", "evaluate",
    "gem_pool", "hmt_loss", "load_config", "load_manifest", "lsce_loss", "max_pool", "min_pool",
    "parse_config", "soft_pool", "synth_generate", "total_loss",
]
