"""The frozen machine task: a small classifier split at an H/4 feature cut.

``head`` maps an image to the cut-point features (the LST target), ``tail``
maps features to class logits. ``tail(head(x))`` is the full network.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Tuple

import torch
import torch.nn.functional as F

from .params import ParameterStore, generator

log = logging.getLogger(__name__)

TAIL_WIDTH = 64
STEM_WIDTH = 32


@dataclass
class TaskProxy:
    params: ParameterStore
    num_classes: int
    feature_channels: int
    accuracy: float = float("nan")

    def cut_shape(self, height: int, width: int) -> Tuple[int, int, int]:
        return (self.feature_channels, height // 4, width // 4)

    def hash(self) -> int:
        return self.params.hash(["taskproxy"])


def init_proxy_params(num_classes: int, feature_channels: int, seed: int) -> ParameterStore:
    gen = generator(seed, "taskproxy-init")
    shapes = {
        "taskproxy.head.0.weight": (STEM_WIDTH, 3, 3, 3),
        "taskproxy.head.1.weight": (STEM_WIDTH, STEM_WIDTH, 3, 3),
        "taskproxy.head.2.weight": (feature_channels, STEM_WIDTH, 3, 3),
        "taskproxy.tail.0.weight": (TAIL_WIDTH, feature_channels, 3, 3),
        "taskproxy.fc.weight": (num_classes, TAIL_WIDTH),
    }
    store = ParameterStore()
    for name, shape in shapes.items():
        fan_in = 1
        for d in shape[1:]:
            fan_in *= d
        bound = (6.0 / fan_in) ** 0.5  # He-uniform; the proxy is trained from scratch
        store[name] = (torch.rand(shape, generator=gen) * 2 - 1) * bound
        store[name.replace("weight", "bias")] = torch.zeros(shape[0])
    return store


def head(x: torch.Tensor, p: ParameterStore) -> torch.Tensor:
    h = F.gelu(F.conv2d(x, p["taskproxy.head.0.weight"], p["taskproxy.head.0.bias"], padding=1))
    h = F.gelu(F.conv2d(h, p["taskproxy.head.1.weight"], p["taskproxy.head.1.bias"], stride=2, padding=1))
    return F.gelu(F.conv2d(h, p["taskproxy.head.2.weight"], p["taskproxy.head.2.bias"], stride=2, padding=1))


def tail(f: torch.Tensor, p: ParameterStore) -> torch.Tensor:
    h = F.gelu(F.conv2d(f, p["taskproxy.tail.0.weight"], p["taskproxy.tail.0.bias"], stride=2, padding=1))
    return F.linear(h.mean(dim=(2, 3)), p["taskproxy.fc.weight"], p["taskproxy.fc.bias"])


def full(x: torch.Tensor, p: ParameterStore) -> torch.Tensor:
    return tail(head(x, p), p)


def _as_batch(t):
    return (t.unsqueeze(0), True) if t.dim() == 3 else (t, False)


def extract_reference_features(x: torch.Tensor, proxy: TaskProxy) -> torch.Tensor:
    """Cut-point features of the uncompressed image(s)."""
    x, single = _as_batch(x)
    with torch.no_grad():
        f = head(x, proxy.params)
    return f[0] if single else f


def classify_from_features(f: torch.Tensor, proxy: TaskProxy) -> torch.Tensor:
    """Class probabilities from cut-point features."""
    f, single = _as_batch(f)
    if f.shape[1] != proxy.feature_channels:
        raise ValueError(f"features have {f.shape[1]} channels, proxy cut has {proxy.feature_channels}")
    probs = torch.softmax(tail(f, proxy.params).double(), dim=1)
    return probs[0] if single else probs


def feature_distortion(f_hat: torch.Tensor, f_ref: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element of the feature tensors."""
    if f_hat.shape != f_ref.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_hat.shape)} vs {tuple(f_ref.shape)}")
    return torch.mean((f_hat - f_ref) ** 2)


def reference_features(dataset, proxy: TaskProxy, batch_size: int = 256) -> torch.Tensor:
    return torch.cat([extract_reference_features(x, proxy)
                      for _, x, _ in dataset.batches(batch_size)])


def proxy_accuracy(dataset, params: ParameterStore, batch_size: int = 256) -> float:
    correct = 0
    with torch.no_grad():
        for _, x, y in dataset.batches(batch_size):
            correct += int((full(x, params).argmax(1) == y).sum())
    return correct / len(dataset)


def train_task_proxy(train_set, val_set, config, seed: int) -> TaskProxy:
    """Train the classifier with Adam and cross-entropy, then freeze it."""
    k = config.num_classes
    if k < 2:
        raise ValueError("the task needs at least 2 classes")
    if len(train_set) == 0:
        raise ValueError("empty training set")
    if len(torch.unique(train_set.labels)) < 2:
        raise ValueError("degenerate dataset: a single class")
    params = init_proxy_params(k, config.feature_channels, seed).clone(requires_grad=True)
    tensors = [params[n] for n in params]
    opt = torch.optim.Adam(tensors, lr=config.proxy_lr)
    shuffle = generator(seed, "taskproxy-shuffle")
    flip = generator(seed, "taskproxy-augment")
    epochs = config.proxy_epochs
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, epochs))
    for epoch in range(epochs):
        total = 0.0
        for _, x, y in train_set.batches(32, shuffle):
            # horizontal flips keep every class label (all shapes are mirror-symmetric)
            mask = torch.rand(len(x), generator=flip) < 0.5
            x = torch.where(mask[:, None, None, None], x.flip(3), x)
            opt.zero_grad()
            loss = F.cross_entropy(full(x, params), y)
            loss.backward()
            opt.step()
            total += loss.item() * len(x)
        sched.step()
        log.info("proxy epoch %d loss %.4f", epoch, total / len(train_set))
    frozen = params.clone()
    acc = proxy_accuracy(val_set, frozen)
    log.info("proxy val accuracy %.4f", acc)
    return TaskProxy(frozen, k, config.feature_channels, acc)


def evaluate_accuracy(dataset, pipeline: Callable[[torch.Tensor], torch.Tensor], proxy: TaskProxy,
                      batch_size: int = 256) -> float:
    """Top-1 accuracy of ``classify_from_features(pipeline(x))`` over the dataset.

    ``pipeline`` maps an image batch to (estimated) cut-point features, e.g.
    base analysis -> rounding -> coding -> LST.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    correct = 0
    with torch.no_grad():
        for _, x, y in dataset.batches(batch_size):
            probs = classify_from_features(pipeline(x), proxy)
            correct += int((probs.argmax(1) == y).sum())
    return correct / len(dataset)
