from .data import (MEMBER, NONMEMBER, LabeledDataset, gaussian_blobs, load_mnist, read_idx,
                   sample, split_pool, with_label_noise)
from .nets import ARCHITECTURES, ProbeNet, UnknownArchitecture, build_network
from .target import QueryError, QueryResult, TargetModel
from .training import (EmptyDatasetError, TrainConfig, TrainingDiverged, checkpoint_hash,
                       evaluate_target, list_checkpoints, load_checkpoint, save_checkpoint,
                       train_target)

__all__ = ["MEMBER", "NONMEMBER", "LabeledDataset", "gaussian_blobs", "load_mnist", "read_idx", "sample",
           "split_pool", "with_label_noise", "ARCHITECTURES", "ProbeNet", "UnknownArchitecture",
           "build_network", "QueryError", "QueryResult", "TargetModel", "EmptyDatasetError",
           "TrainConfig", "TrainingDiverged", "checkpoint_hash", "evaluate_target", "list_checkpoints",
           "load_checkpoint", "save_checkpoint", "train_target"]
