"""Model checkpoints: every named parameter plus the config in the archive header."""
from .config import ModelConfig
from .data import read_archive, write_archive
from .errors import ValidationError
from .model import AracModel


def save_checkpoint(model, path, extra=None):
    header = {"kind": "checkpoint", "config": model.config.to_dict()}
    if extra:
        header.update(extra)
    return write_archive(path, model.state_dict(), header)


def load_checkpoint(path, dtype=None):
    """Rebuild the model stored at ``path``; returns ``(model, header)``."""
    tensors, header = read_archive(path, with_header=True)
    if header.get("kind") != "checkpoint" or "config" not in header:
        raise ValidationError(f"{path}: not a checkpoint archive")
    values = dict(header["config"])
    if dtype is not None:
        values["dtype"] = dtype
    model = AracModel(ModelConfig.from_dict(values))
    model.load_state_dict(tensors)
    return model, header
