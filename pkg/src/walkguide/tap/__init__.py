"""Temporal-aware trigger prediction: a small 3D-conv + state-MLP gate."""

from .config import TapConfig
from .gradcheck import grad_check, grad_check_report
from .model import (
    TapModel,
    TapOutput,
    TapShapeError,
    constant_model,
    forward_with_cache,
    init_model,
    preprocess_frames,
    tap_forward,
    tap_loss_and_grad,
)
from .policy import Decision, TriggerPolicy, decide_trigger
from .store import ModelFileError, model_digest, model_load, model_save
from .train import FrameTensorCache, TrainResult, accuracy, predict, tap_train
