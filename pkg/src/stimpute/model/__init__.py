"""The bidirectional gated graph recurrent imputation model."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig
from .fibmap import ForwardOutput, combined_loss, forward, st_encode
from .graph import GraphBatch
from .params import (PatientEmbeddings, checksum, init_embeddings, init_shared,
                     is_patient_specific, parameter_count)

__all__ = [
    "ModelConfig", "GraphBatch", "PatientEmbeddings", "ForwardOutput", "forward", "st_encode",
    "combined_loss", "init_shared", "init_embeddings", "checksum", "is_patient_specific",
    "parameter_count", "save_checkpoint", "load_checkpoint",
]
