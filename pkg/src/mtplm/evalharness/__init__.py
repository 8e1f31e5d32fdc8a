from .head import HeadConfig, ConvBertHead, convbert_head_forward, train_head, TASK_KINDS
from .metrics import accuracy, contact_map_from_coords, mean_std, precision_at, spearman
from .tasks import EvalRecord, extract_embeddings, load_task_file, run_task

__all__ = [
    "HeadConfig", "ConvBertHead", "convbert_head_forward", "train_head", "TASK_KINDS",
    "accuracy", "contact_map_from_coords", "mean_std", "precision_at", "spearman",
    "EvalRecord", "extract_embeddings", "load_task_file", "run_task",
]
