"""Dilated residual keyword-spotting network with an optional own-voice
detection head, plus parameter and multiplication accounting.

Graph: an initial 3x3 convolution, a stack of residual blocks whose two
convolutions share an exponentially growing dilation (layer l dilates by
2^floor(l/3)), one final dilated convolution with batch norm, global average
pooling over time and quefrency, and two dense heads on the pooled vector:
keyword softmax and, in multi-task mode, a one-unit sigmoid own-voice
detector. Convolutions are unbiased and same-padded, so the feature plane
keeps its extent through the whole stack and the network accepts any input
width (single- or dual-channel feature stacks).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

KERNEL = 3
BN_EPS = 1e-3
# torch convention: weight of the new batch in the running estimate. The
# inference statistics must track the rapidly moving training distribution
# within a few batches, or evaluation lags epochs behind the weights.
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ModelSpec:
    num_keyword_classes: int = 11
    num_feature_maps: int = 45
    num_residual_blocks: int = 6
    multitask: bool = True
    first_conv_batchnorm: bool = False

    def validate(self) -> None:
        if self.num_keyword_classes <= 0:
            raise ValueError("num_keyword_classes must be positive")
        if self.num_feature_maps <= 0 or self.num_residual_blocks <= 0:
            raise ValueError("feature maps and residual blocks must be positive")

    @property
    def num_residual_layers(self) -> int:
        return 2 * self.num_residual_blocks

    @property
    def dilation_schedule(self) -> list[tuple[int, int]]:
        return [(2 ** (l // 3),) * 2 for l in range(self.num_residual_layers)]

    @property
    def final_dilation(self) -> tuple[int, int]:
        # the last convolution always dilates by 16 on both axes, independent
        # of depth; with same-padding this holds for small feature planes too
        return (16, 16)


def count_params(spec: ModelSpec) -> int:
    """Closed-form weight count: conv kernels (biases are zero and excluded),
    batch-norm scale/shift pairs, and the dense heads."""
    spec.validate()
    m, c = spec.num_feature_maps, spec.num_keyword_classes
    convs = spec.num_residual_layers + 1  # residual convs plus the final conv
    total = KERNEL * KERNEL * m                       # input conv, 1 -> m
    total += convs * KERNEL * KERNEL * m * m
    total += convs * 2 * m                            # batch-norm scale/shift
    if spec.first_conv_batchnorm:
        total += 2 * m
    total += m * c + c                                # keyword head
    if spec.multitask:
        total += m + 1                                # own-voice head
    return total


def count_multiplies(spec: ModelSpec, input_shape: tuple[int, int]) -> int:
    """Multiplications per forward pass at the given T x F input. Counts
    convolution and dense multiplies plus two per batch-normalized
    activation; pooling and activation functions are excluded."""
    spec.validate()
    t, f = input_shape
    m, c = spec.num_feature_maps, spec.num_keyword_classes
    plane = t * f
    total = KERNEL * KERNEL * 1 * m * plane
    total += (spec.num_residual_layers + 1) * KERNEL * KERNEL * m * m * plane
    num_bn = spec.num_residual_layers + 1 + int(spec.first_conv_batchnorm)
    total += num_bn * 2 * m * plane
    total += m * c
    if spec.multitask:
        total += m * 1
    return total


class KwsResNet(nn.Module):
    def __init__(self, spec: ModelSpec, init_seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec = spec
        m = spec.num_feature_maps
        self.conv0 = nn.Conv2d(1, m, KERNEL, padding=1, bias=False)
        self.bn0 = nn.BatchNorm2d(m, eps=BN_EPS, momentum=BN_MOMENTUM) \
            if spec.first_conv_batchnorm else None
        self.res_convs = nn.ModuleList()
        self.res_bns = nn.ModuleList()
        for dil in spec.dilation_schedule:
            self.res_convs.append(nn.Conv2d(m, m, KERNEL, padding=dil[0],
                                            dilation=dil, bias=False))
            self.res_bns.append(nn.BatchNorm2d(m, eps=BN_EPS, momentum=BN_MOMENTUM))
        fd = spec.final_dilation
        self.final_conv = nn.Conv2d(m, m, KERNEL, padding=fd[0], dilation=fd,
                                    bias=False)
        self.final_bn = nn.BatchNorm2d(m, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.fc_keyword = nn.Linear(m, spec.num_keyword_classes)
        self.fc_ownvoice = nn.Linear(m, 1) if spec.multitask else None
        self._init_weights(init_seed)

    def _init_weights(self, seed: int) -> None:
        # numpy-seeded fan-in uniform so builds reproduce independently of
        # torch's global generator state
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Conv2d):
                    fan_in = module.in_channels * KERNEL * KERNEL
                    bound = 1.0 / np.sqrt(fan_in)
                    module.weight.copy_(torch.from_numpy(
                        rng.uniform(-bound, bound, module.weight.shape)).float())
                elif isinstance(module, nn.Linear):
                    bound = 1.0 / np.sqrt(module.in_features)
                    module.weight.copy_(torch.from_numpy(
                        rng.uniform(-bound, bound, module.weight.shape)).float())
                    module.bias.zero_()
                elif isinstance(module, nn.BatchNorm2d):
                    module.weight.fill_(1.0)
                    module.bias.zero_()

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        """x: (batch, T, F) normalized features. Returns keyword logits and,
        in multi-task mode, own-voice probabilities in [0, 1]."""
        if x.ndim != 3:
            raise ValueError(f"expected (batch, T, F) input, got shape {tuple(x.shape)}")
        x = x.unsqueeze(1)
        x = torch.relu(self.conv0(x))
        if self.bn0 is not None:
            x = self.bn0(x)
        for block in range(self.spec.num_residual_blocks):
            i = 2 * block
            y = self.res_bns[i](torch.relu(self.res_convs[i](x)))
            y = self.res_bns[i + 1](torch.relu(self.res_convs[i + 1](y)))
            x = x + y
        x = self.final_bn(self.final_conv(x))
        pooled = x.mean(dim=(2, 3))
        logits = self.fc_keyword(pooled)
        if self.fc_ownvoice is None:
            return logits, None
        return logits, torch.sigmoid(self.fc_ownvoice(pooled)).squeeze(-1)


@dataclass
class ModelOutput:
    keyword_posterior: np.ndarray  # length-C simplex
    ownvoice_prob: float | None


def predict_batch(model: KwsResNet, features: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Inference-mode posteriors for a (batch, T, F) feature array."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits, ov = model(torch.from_numpy(np.ascontiguousarray(features, dtype=np.float32)))
            posterior = torch.softmax(logits, dim=1).numpy()
            return posterior, None if ov is None else ov.numpy()
    finally:
        model.train(was_training)


def predict(model: KwsResNet, features: np.ndarray) -> ModelOutput:
    posterior, ov = predict_batch(model, features[None])
    return ModelOutput(keyword_posterior=posterior[0],
                       ownvoice_prob=None if ov is None else float(ov[0]))


# Checkpoint: magic, little-endian u32 header length, JSON header with the
# spec echo / training seed / ordered tensor index, then the tensors as raw
# little-endian float32 in index order.
_CKPT_MAGIC = b"OVCK"


def _state_tensors(model: KwsResNet) -> list[tuple[str, torch.Tensor]]:
    return list(model.state_dict().items())


def save_checkpoint(path, model: KwsResNet, seed: int,
                    meta: dict | None = None) -> None:
    tensors = _state_tensors(model)
    header = {
        "format": "kws-checkpoint-v1",
        "spec": dataclasses.asdict(model.spec),
        "seed": seed,
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, tensor in tensors:
            fh.write(np.ascontiguousarray(
                tensor.detach().numpy(), dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[KwsResNet, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        (size,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(size))
        if header.get("format") != "kws-checkpoint-v1":
            raise ValueError(f"{path}: unsupported checkpoint format")
        spec = ModelSpec(**header["spec"])
        model = KwsResNet(spec)
        state = model.state_dict()
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = np.frombuffer(fh.read(n * 4), dtype="<f4").reshape(shape)
            target = state[entry["name"]]
            state[entry["name"]] = torch.from_numpy(raw.copy()).to(target.dtype)
        model.load_state_dict(state)
    model.eval()
    return model, header
