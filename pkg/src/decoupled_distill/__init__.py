"""Decoupled teacher-student distillation for single-scale grid detectors, on numpy."""
from .detector import build_model, load_checkpoint, save_checkpoint
from .evaluation import evaluate
from .pipeline import TrainConfig, aggregate, decoupled_run, distill_stage, finetune_stage, pseudo_label
from .synthdata import SceneConfig, gen_dataset, read_dataset, write_dataset

__version__ = "0.1.0"
