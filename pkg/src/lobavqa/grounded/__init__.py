from .losses import dice_loss, downsample_majority, loss_seg, loss_text, loss_total
from .model import ForwardTrace, Generation, GroundedModel, Highlight, ModelConfig, SegPrediction
from .tokenizer import Tokenizer, build_vocab, grounded_response
from .training import (grad_check, load_checkpoint, save_checkpoint, train,
                       write_loss_curve)

__all__ = [
    "ForwardTrace", "Generation", "GroundedModel", "Highlight", "ModelConfig", "SegPrediction",
    "Tokenizer", "build_vocab", "dice_loss", "downsample_majority", "grad_check", "grounded_response",
    "load_checkpoint", "loss_seg", "loss_text", "loss_total", "save_checkpoint", "train",
    "write_loss_curve",
]
