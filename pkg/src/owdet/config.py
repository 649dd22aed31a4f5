"""Run configuration: one flat key=value text file with full defaulting.

Every tunable in the pipeline is a field here, so a config file may set
any subset of keys and the rest fall back to the defaults below. The
canonical serialization (sorted keys, repr-formatted values) feeds the
config hash embedded in checkpoints and reports.
"""

import dataclasses
import hashlib
from dataclasses import dataclass

from .detector import DetectorConfig
from .losses import LossWeights
from .matching import CostWeights
from .pseudo_label import PseudoConfig


@dataclass
class RunConfig:
    # data
    groups: tuple = ((1, 2, 3, 4), (5, 6, 7, 8))
    train_per_task: int = 200
    eval_per_task: int = 25
    data_seed: int = 7
    # model
    image_size: int = 64
    d_model: int = 32
    n_queries: int = 20
    conv1_channels: int = 16
    conv2_channels: int = 32
    ffn_hidden: int = 64
    box_hidden: int = 32
    # optimization
    seed: int = 0
    optimizer: str = "adam"
    lr: float = 0.002
    momentum: float = 0.9
    clip_norm: float = 1.0
    batch_size: int = 2
    pretrain_epochs: int = 200
    pretrain_decay_epoch: int = 160
    owl_epochs: int = 14
    owl_decay_epoch: int = 8
    owl_lr: float = 0.002
    replay_epochs: int = 4
    replay_lr: float = 0.0005
    replay_freeze: bool = False
    # self-labeling
    delta: float = 0.5
    k: int = 5
    k_ss: int = 5
    nms_iou: float = 0.5
    overlap_iou: float = 0.05
    min_retention: float = 0.25
    min_side: float = 0.6
    # supplementary proposals
    ss_k: float = 300.0
    ss_min_size: int = 20
    # loss weights
    lambda_b_cls: float = 1.0
    lambda_con: float = 0.01
    lambda_feat: float = 1.0
    lambda_cls: float = 1.0
    lambda_feat_aug: float = 1.0
    lambda_cls_aug: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_cls: float = 2.0
    kd_threshold: float = 0.5
    # replay store
    exemplar_cap: int = 50
    # evaluation
    top_k: int = 50
    recall_level: float = 0.8
    score_floor: float = 0.05

    def __post_init__(self):
        self.groups = tuple(tuple(int(c) for c in g) for g in self.groups)
        for g in self.groups:
            if not g:
                raise ValueError("empty class group")

    # -- sub-configs ------------------------------------------------------

    def detector_config(self):
        return DetectorConfig(image_size=self.image_size, d_model=self.d_model,
                              n_queries=self.n_queries,
                              conv1_channels=self.conv1_channels,
                              conv2_channels=self.conv2_channels,
                              ffn_hidden=self.ffn_hidden,
                              box_hidden=self.box_hidden)

    def pseudo_config(self):
        return PseudoConfig(delta=self.delta, k=self.k, k_ss=self.k_ss,
                            nms_iou=self.nms_iou, overlap_iou=self.overlap_iou,
                            min_retention=self.min_retention)

    def loss_weights(self):
        return LossWeights(lambda_b_cls=self.lambda_b_cls,
                           lambda_con=self.lambda_con,
                           lambda_feat=self.lambda_feat,
                           lambda_cls=self.lambda_cls,
                           lambda_feat_aug=self.lambda_feat_aug,
                           lambda_cls_aug=self.lambda_cls_aug,
                           w_l1=self.w_l1, w_giou=self.w_giou)

    def cost_weights(self):
        return CostWeights(w_cls=self.w_cls, w_l1=self.w_l1, w_giou=self.w_giou)

    # -- serialization ------------------------------------------------------

    def to_text(self):
        lines = []
        for f in sorted(dataclasses.fields(self), key=lambda f: f.name):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        defaults = cls()
        seen = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            if key in seen:
                raise ValueError(f"line {lineno}: duplicate key {key!r}")
            try:
                seen[key] = _parse_value(value, getattr(defaults, key))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
        return cls(**seen)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _format_value(v):
    if isinstance(v, tuple):
        return "|".join(",".join(str(c) for c in g) for g in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text, default):
    if isinstance(default, tuple):
        groups = []
        for part in text.split("|"):
            part = part.strip()
            if not part:
                raise ValueError(f"empty group in {text!r}")
            groups.append(tuple(int(c) for c in part.split(",")))
        return tuple(groups)
    if isinstance(default, bool):
        low = text.lower()
        if low not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return low == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text
