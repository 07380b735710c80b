"""Five-class stone classifier: backbones, training loop, prediction and the
feature-map/gradient access needed by the activation-map explainer.

Two backbones share every contract. "paper" is a deep pre-activation residual
network (152 layers) for full-scale training on real hardware; "desk" is a
four-block CNN that trains in minutes on a laptop CPU and is what the test
suite exercises end to end.
"""

from __future__ import annotations

import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import augment
from .augment import AugmentConfig
from .dataset import CLASS_ORDER, INPUT_SIZE, ClassLabel

CHECKPOINT_FORMAT = "endostone-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "desk"  # "desk" | "paper"
    num_classes: int = 5
    input_size: int = INPUT_SIZE
    init_seed: int = 0

    def validate(self) -> None:
        if self.backbone not in ("desk", "paper"):
            raise ValueError(f"unsupported backbone: {self.backbone!r}")
        if self.num_classes != len(CLASS_ORDER):
            raise ValueError("num_classes is fixed at 5")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 8
    epochs: int = 100
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


@dataclass(frozen=True)
class Prediction:
    probabilities: np.ndarray  # (5,) softmax probabilities in CLASS_ORDER
    argmax_class: ClassLabel


class DeskBackbone(nn.Module):
    """Four conv blocks (16/32/64/128, 3x3 conv + ReLU + 2x2 max-pool), global
    average pooling and a linear head. Last-conv feature maps are 16x16x128
    for a 256x256 input."""

    def __init__(self, num_classes: int = 5):
        super().__init__()
        blocks = []
        cin = 3
        for cout in (16, 32, 64, 128):
            blocks += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2)]
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(128, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x)

    def head(self, a: torch.Tensor) -> torch.Tensor:
        return self.fc(a.mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class PreactBottleneck(nn.Module):
    """Pre-activation bottleneck residual block (BN-ReLU before each conv)."""

    def __init__(self, cin: int, cmid: int, stride: int = 1):
        super().__init__()
        cout = 4 * cmid
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cmid, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cmid)
        self.conv2 = nn.Conv2d(cmid, cmid, 3, stride=stride, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(cmid)
        self.conv3 = nn.Conv2d(cmid, cout, 1, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)
        self.relu = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pre = self.relu(self.bn1(x))
        residual = self.shortcut(pre) if self.shortcut is not None else x
        out = self.conv1(pre)
        out = self.conv2(self.relu(self.bn2(out)))
        out = self.conv3(self.relu(self.bn3(out)))
        return out + residual


class ResNetV2Backbone(nn.Module):
    """152-layer pre-activation residual network (bottleneck stacks 3/8/36/3).

    Last-conv feature maps (after the final BN-ReLU) are 8x8x2048 for a
    256x256 input.
    """

    def __init__(self, num_classes: int = 5):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        cin = 64
        for cmid, depth, stride in ((64, 3, 1), (128, 8, 2), (256, 36, 2), (512, 3, 2)):
            for i in range(depth):
                stages.append(PreactBottleneck(cin, cmid, stride if i == 0 else 1))
                cin = 4 * cmid
        self.stages = nn.Sequential(*stages)
        self.final = nn.Sequential(nn.BatchNorm2d(cin), nn.ReLU())
        self.fc = nn.Linear(cin, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.final(self.stages(self.stem(x)))

    def head(self, a: torch.Tensor) -> torch.Tensor:
        return self.fc(a.mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class TrainedModel:
    module: nn.Module
    config: ModelConfig
    history: list[EpochStats] = field(default_factory=list)


def build_model(config: ModelConfig) -> TrainedModel:
    """Construct a model with weights drawn deterministically from init_seed."""
    config.validate()
    torch.manual_seed(config.init_seed)
    if config.backbone == "desk":
        module = DeskBackbone(config.num_classes)
    else:
        module = ResNetV2Backbone(config.num_classes)
    module.eval()
    return TrainedModel(module=module, config=config)


def _to_tensor(img: np.ndarray, input_size: int) -> torch.Tensor:
    if img.shape != (input_size, input_size, 3):
        raise ValueError(
            f"expected ({input_size}, {input_size}, 3) input, got {img.shape}"
        )
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))[None]).float()


def predict(model: TrainedModel, img: np.ndarray) -> Prediction:
    """Softmax probabilities over the five classes; argmax ties resolve to the
    first class in CLASS_ORDER."""
    x = _to_tensor(img, model.config.input_size)
    model.module.eval()
    with torch.no_grad():
        logits = model.module(x)
        probs = torch.softmax(logits, dim=1)[0].numpy().astype(np.float64)
    return Prediction(probabilities=probs, argmax_class=CLASS_ORDER[int(np.argmax(probs))])


def train(
    model: TrainedModel,
    train_set: list[tuple[np.ndarray, ClassLabel]],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> TrainedModel:
    """Adam / categorical cross-entropy training with per-sample augmentation.

    Runs epochs x ceil(N / batch_size) optimizer steps; data order is
    reshuffled from rng every epoch and the last partial batch is kept. The
    result is deterministic given (init weights, rng state) on a fixed thread
    count.
    """
    if not train_set:
        raise ValueError("empty training set")
    input_size = model.config.input_size
    images = []
    targets = []
    for img, label in train_set:
        if img.shape != (input_size, input_size, 3):
            raise ValueError(f"expected ({input_size}, {input_size}, 3) image, got {img.shape}")
        images.append(np.asarray(img, dtype=np.float32))
        targets.append(label.index)
    target_arr = np.asarray(targets)

    module = model.module
    module.train()
    optimizer = torch.optim.Adam(module.parameters(), lr=cfg.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    n = len(images)

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = np.stack(
                [
                    augment.apply(augment.sample_transform(rng, cfg.augment), images[i])
                    for i in idx
                ]
            )
            x = torch.from_numpy(batch.transpose(0, 3, 1, 2).copy())
            y = torch.from_numpy(target_arr[idx])
            logits = module(x)
            loss = loss_fn(logits, y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += float(loss) * len(idx)
            correct += int((logits.argmax(dim=1) == y).sum())
        model.history.append(EpochStats(epoch=epoch, loss=loss_sum / n, accuracy=correct / n))

    module.eval()
    return model


def feature_maps_and_grads(
    model: TrainedModel, img: np.ndarray, target_class: ClassLabel
) -> tuple[np.ndarray, np.ndarray]:
    """Last-conv activations A and d(logit of target_class)/dA, both H'xW'xK."""
    if not isinstance(target_class, ClassLabel):
        raise ValueError(f"invalid class: {target_class!r}")
    x = _to_tensor(img, model.config.input_size)
    model.module.eval()
    with torch.no_grad():
        a = model.module.features(x)
    a = a.detach().requires_grad_(True)
    logits = model.module.head(a)
    score = logits[0, target_class.index]
    (grads,) = torch.autograd.grad(score, a)
    fmap = a.detach()[0].permute(1, 2, 0).numpy().astype(np.float64)
    grad = grads[0].permute(1, 2, 0).numpy().astype(np.float64)
    return fmap, grad


def save_checkpoint(model: TrainedModel, path: str | Path) -> None:
    """Self-describing checkpoint: versioned header, config, weights, history.

    Written atomically; identical models serialize to identical bytes.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "weights": {
            name: tensor.numpy().copy()
            for name, tensor in sorted(model.module.state_dict().items())
        },
        "history": [asdict(h) for h in model.history],
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(payload, fh, protocol=4)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> TrainedModel:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a checkpoint file: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {payload.get('version')}")
    config = ModelConfig(**payload["config"])
    model = build_model(config)
    state = {name: torch.from_numpy(arr) for name, arr in payload["weights"].items()}
    model.module.load_state_dict(state)
    model.history = [EpochStats(**h) for h in payload["history"]]
    return model
