"""Small CIFAR-style ResNets with feature taps, and their checkpoint format.

Layout: 3x3 stem conv -> BN -> act, then one group of basic blocks per entry
of ``group_channels`` (strides 1, 2, 2, ...), global average pool, linear
head. A block is conv-BN-act-conv-BN plus a shortcut (1x1 conv + BN when
the shape changes), followed by an activation. Taps are the outputs of each
group after its last activation.

Depth ``6n + 2`` gives ``n`` blocks per group: 8 -> 1, 20 -> 3.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, FormatError, InputError
from .quantizers import QReLUParams, QuantizedLayerState, project, qrelu, ste_weights

SUPPORTED_DEPTHS = (8, 20)
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
CHECKPOINT_MAGIC = b"FAQD"
CHECKPOINT_VERSION = 1


@dataclass
class NetSpec:
    name: str = "resnet-tiny-8"
    depth: int = 8
    group_channels: tuple[int, ...] = (16, 32, 64)
    classes: int = 10
    in_channels: int = 3
    weight_bits: int = 32
    act_bits: int = 32

    def __post_init__(self):
        self.group_channels = tuple(int(c) for c in self.group_channels)
        if self.depth not in SUPPORTED_DEPTHS:
            raise ConfigurationError(f"unsupported depth {self.depth}; supported: {SUPPORTED_DEPTHS}")
        if not self.group_channels:
            raise ConfigurationError("group_channels must be non-empty")
        if self.weight_bits not in (1, 2, 4, 32) or self.act_bits not in (1, 2, 4, 32):
            raise ConfigurationError(f"unsupported bit-widths W{self.weight_bits}A{self.act_bits}")

    @property
    def tap_count(self) -> int:
        return len(self.group_channels)

    @property
    def blocks_per_group(self) -> int:
        return (self.depth - 2) // 6

    @classmethod
    def named(cls, name: str, **kw) -> "NetSpec":
        """``resnet-tiny-8`` or ``resnet-tiny-20``."""
        depths = {"resnet-tiny-8": 8, "resnet-tiny-20": 20}
        if name not in depths:
            raise ConfigurationError(f"unknown network name '{name}'; known: {sorted(depths)}")
        return cls(name=name, depth=depths[name], **kw)


@dataclass
class ConvLayer:
    name: str
    cin: int
    cout: int
    kernel: int
    stride: int
    padding: int


def _layout(spec: NetSpec) -> list[tuple]:
    """Ordered layer records: ("conv", ConvLayer), ("bn", name, C), ("act", name), ..."""
    rec: list[tuple] = []
    c0 = spec.group_channels[0]
    rec.append(("conv", ConvLayer("stem.conv", spec.in_channels, c0, 3, 1, 1)))
    rec.append(("bn", "stem.bn", c0))
    rec.append(("act", "stem.act"))
    cin = c0
    for g, cout in enumerate(spec.group_channels):
        for b in range(spec.blocks_per_group):
            stride = 2 if (g > 0 and b == 0) else 1
            p = f"g{g}.b{b}"
            rec.append(("conv", ConvLayer(f"{p}.conv1", cin, cout, 3, stride, 1)))
            rec.append(("bn", f"{p}.bn1", cout))
            rec.append(("act", f"{p}.act1"))
            rec.append(("conv", ConvLayer(f"{p}.conv2", cout, cout, 3, 1, 1)))
            rec.append(("bn", f"{p}.bn2", cout))
            if stride != 1 or cin != cout:
                rec.append(("conv", ConvLayer(f"{p}.proj", cin, cout, 1, stride, 0)))
                rec.append(("bn", f"{p}.proj_bn", cout))
            rec.append(("act", f"{p}.act2"))
            cin = cout
    return rec


class Network:
    """Parameters, BN buffers, quantization states and activation resolutions of one net.

    ``params`` maps names to trainable tensors: ``<conv>.w`` (float shadow
    weights), ``<bn>.gamma``/``<bn>.beta``, ``fc.w``/``fc.b`` and, with
    quantized activations, ``<act>.alpha``.
    """

    def __init__(self, spec: NetSpec):
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.quant: dict[str, QuantizedLayerState] = {}
        self.act_sites: list[str] = []
        self.calibrated: set[str] = set()
        self.training = False
        self.origin = "init"
        self._layout = _layout(spec)
        self._calibrating = False

    # modes ----------------------------------------------------------------

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    @property
    def conv_layers(self) -> list[ConvLayer]:
        return [r[1] for r in self._layout if r[0] == "conv"]

    @property
    def qrelu_params(self) -> dict[str, QReLUParams]:
        if self.spec.act_bits == 32:
            return {}
        return {s: QReLUParams(float(self.params[f"{s}.alpha"].data.reshape(())), self.spec.act_bits) for s in self.act_sites}

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward_weight(self, conv: str) -> np.ndarray:
        """The weights the forward pass uses for ``conv`` (u if quantized, else w)."""
        st = self.quant.get(conv)
        return st.u if st is not None else self.params[f"{conv}.w"].data

    def requantize(self) -> None:
        """Recompute every forward weight u from the current shadow weights."""
        for name, st in self.quant.items():
            st.w = self.params[f"{name}.w"].data
            st.u = project(st)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        for name in sorted(self.buffers):
            h.update(name.encode())
            h.update(self.buffers[name].tobytes())
        return h.hexdigest()

    # forward --------------------------------------------------------------

    def _conv(self, layer: ConvLayer, x: Tensor) -> Tensor:
        w = self.params[f"{layer.name}.w"]
        st = self.quant.get(layer.name)
        if st is not None:
            w = ste_weights(w, st.u)
        return ad.conv2d(x, w, stride=layer.stride, padding=layer.padding)

    def _bn(self, name: str, x: Tensor) -> Tensor:
        return ad.batch_norm(
            x,
            self.params[f"{name}.gamma"],
            self.params[f"{name}.beta"],
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            training=self.training,
            momentum=BN_MOMENTUM,
            eps=BN_EPS,
        )

    def _act(self, name: str, x: Tensor) -> Tensor:
        bits = self.spec.act_bits
        if bits == 32:
            return ad.relu(x)
        alpha = self.params[f"{name}.alpha"]
        if self._calibrating and name not in self.calibrated:
            # (2^b - 1) * alpha0 = 99th percentile of |pre-activation|
            p99 = float(np.percentile(np.abs(x.data), 99))
            alpha.data[...] = max(p99, 1e-3) / (2**bits - 1)
            self.calibrated.add(name)
        return qrelu(x, alpha, bits)

    def forward_with_taps(self, x) -> tuple[Tensor, list[Tensor]]:
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise InputError(f"{self.spec.name}: expected input (B, {self.spec.in_channels}, H, W), got {x.shape}")
        taps: list[Tensor] = []
        pending = None  # shortcut input of the current block
        block_in = None
        h = x
        current_group = None
        for rec in self._layout:
            kind = rec[0]
            if kind == "conv":
                layer = rec[1]
                if layer.name.endswith(".conv1"):
                    block_in = h
                    group = layer.name.split(".")[0]
                    if current_group is not None and group != current_group:
                        taps.append(pending)
                    current_group = group
                if layer.name.endswith(".proj"):
                    shortcut = self._conv(layer, block_in)
                    pending = ("proj", shortcut)
                else:
                    h = self._conv(layer, h)
            elif kind == "bn":
                name = rec[1]
                if name.endswith(".proj_bn"):
                    pending = ("ready", self._bn(name, pending[1]))
                else:
                    h = self._bn(name, h)
            else:
                name = rec[1]
                if name.endswith(".act2"):
                    shortcut = pending[1] if isinstance(pending, tuple) and pending[0] == "ready" else block_in
                    h = h + shortcut
                h = self._act(name, h)
                if name.endswith(".act2"):
                    pending = h
        taps.append(pending)
        pooled = ad.global_avg_pool(h)
        logits = ad.matmul(pooled, ad.transpose(self.params["fc.w"], (1, 0)))
        logits = ad.bias_add(logits, self.params["fc.b"])
        return logits, taps

    def __call__(self, x) -> Tensor:
        return self.forward_with_taps(x)[0]

    def calibrate_activations(self, x) -> None:
        """Set uncalibrated activation resolutions from one warm-up batch."""
        if self.spec.act_bits == 32:
            return
        was_training = self.training
        self.eval()
        self._calibrating = True
        try:
            with ad.no_grad():
                self.forward_with_taps(x)
        finally:
            self._calibrating = False
            self.training = was_training


def forward_with_taps(net: Network, x) -> tuple[Tensor, list[Tensor]]:
    """Logits and the list of per-group feature maps."""
    return net.forward_with_taps(x)


def build_network(spec: NetSpec, seed: int, quant_mode: str = "qat", lambda0: float = 1.0, eta: float = 1.02) -> Network:
    """Deterministically initialized network for ``spec``.

    Convs get He-normal weights, BN scale 1 and shift 0, the linear head a
    uniform(+-1/sqrt(fan_in)) init with zero bias. Conv layers are quantized
    when ``spec.weight_bits < 32``.
    """
    net = Network(spec)
    rng = np.random.default_rng(seed)
    for rec in net._layout:
        if rec[0] == "conv":
            layer = rec[1]
            fan_in = layer.cin * layer.kernel * layer.kernel
            w = rng.standard_normal((layer.cout, layer.cin, layer.kernel, layer.kernel)) * np.sqrt(2.0 / fan_in)
            net.params[f"{layer.name}.w"] = Tensor(w, requires_grad=True)
        elif rec[0] == "bn":
            _, name, c = rec
            net.params[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True)
            net.params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True)
            net.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=np.float32)
            net.buffers[f"{name}.running_var"] = np.ones(c, dtype=np.float32)
        else:
            net.act_sites.append(rec[1])
    c_last = spec.group_channels[-1]
    bound = 1.0 / np.sqrt(c_last)
    net.params["fc.w"] = Tensor(rng.uniform(-bound, bound, (spec.classes, c_last)), requires_grad=True)
    net.params["fc.b"] = Tensor(np.zeros(spec.classes), requires_grad=True)
    if spec.act_bits != 32:
        for site in net.act_sites:
            net.params[f"{site}.alpha"] = Tensor(np.full((), 1.0 / (2**spec.act_bits - 1)), requires_grad=True)
    _attach_quant(net, quant_mode, lambda0, eta)
    return net


def _attach_quant(net: Network, mode: str, lambda0: float, eta: float) -> None:
    net.quant = {}
    if net.spec.weight_bits == 32:
        return
    for layer in net.conv_layers:
        w = net.params[f"{layer.name}.w"].data
        net.quant[layer.name] = QuantizedLayerState.create(w, net.spec.weight_bits, mode=mode, lam=lambda0, eta=eta)


def quantize_network(
    net: Network, weight_bits: int, act_bits: int, quant_mode: str = "qat", lambda0: float = 1.0, eta: float = 1.02
) -> Network:
    """A copy of a (float) network with quantized convs and/or activations.

    Used to start fine-tuning from a float checkpoint. Activation resolutions
    are left uncalibrated.
    """
    spec = NetSpec(**{**asdict(net.spec), "weight_bits": weight_bits, "act_bits": act_bits})
    out = Network(spec)
    out.origin = net.origin
    out.act_sites = list(net.act_sites)
    for name, p in net.params.items():
        if name.endswith(".alpha"):
            continue
        out.params[name] = Tensor(p.data.copy(), requires_grad=True)
    out.buffers = {k: v.copy() for k, v in net.buffers.items()}
    if act_bits != 32:
        for site in out.act_sites:
            out.params[f"{site}.alpha"] = Tensor(np.full((), 1.0 / (2**act_bits - 1)), requires_grad=True)
    _attach_quant(out, quant_mode, lambda0, eta)
    return out


# ---------------------------------------------------------------------------
# checkpoints
#
# little-endian layout:
#   magic "FAQD" | u32 version | u32 spec_len | spec JSON (utf-8) | u32 record count
#   per record: u16 name_len | name | u8 ndim | u32 dims... | float32 data


def _records(net: Network) -> list[tuple[str, np.ndarray]]:
    recs = [(f"param:{k}", v.data) for k, v in net.params.items()]
    recs += [(f"buffer:{k}", v) for k, v in net.buffers.items()]
    for k, st in net.quant.items():
        recs.append((f"lambda:{k}", np.array([st.lam], dtype=np.float32)))
    return recs


def _spec_record(net: Network) -> dict:
    st = next(iter(net.quant.values()), None)
    return {
        "spec": {**asdict(net.spec), "group_channels": list(net.spec.group_channels)},
        "quant_mode": st.mode if st else "qat",
        "eta": st.eta if st else 1.02,
        "calibrated": sorted(net.calibrated),
    }


def save_checkpoint(net: Network, path) -> None:
    path = Path(path)
    out = bytearray(CHECKPOINT_MAGIC)
    spec = json.dumps(_spec_record(net), sort_keys=True).encode()
    out += struct.pack("<II", CHECKPOINT_VERSION, len(spec)) + spec
    recs = _records(net)
    out += struct.pack("<I", len(recs))
    for name, arr in recs:
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated while reading {what}")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Network:
    """Load a network saved by :func:`save_checkpoint`; validates every record."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("not a FAQD checkpoint (bad magic)")
    (version, spec_len) = r.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(spec_len, "spec record").decode())
        spec = NetSpec(**meta["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed spec record: {exc}") from None
    net = build_network(spec, seed=0, quant_mode=meta.get("quant_mode", "qat"), eta=meta.get("eta", 1.02))
    expected = dict(_records(net))
    (count,) = r.unpack("<I", "record count")
    if count != len(expected):
        raise FormatError(f"checkpoint has {count} records, network expects {len(expected)}")
    loaded: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"record {i} name length")
        name = r.take(nlen, f"record {i} name").decode(errors="replace")
        (ndim,) = r.unpack("<B", f"record '{name}' rank")
        shape = r.unpack(f"<{ndim}I", f"record '{name}' shape")
        if name not in expected:
            raise FormatError(f"unexpected record '{name}'")
        if tuple(shape) != expected[name].shape:
            raise FormatError(f"record '{name}': shape {tuple(shape)} != expected {expected[name].shape}")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        loaded[name] = np.frombuffer(r.take(nbytes, f"record '{name}' data"), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after last record")
    for name, arr in loaded.items():
        kind, key = name.split(":", 1)
        if kind == "param":
            net.params[key].data[...] = arr
        elif kind == "buffer":
            net.buffers[key][...] = arr
        else:
            net.quant[key].lam = float(arr[0])
    net.calibrated = set(meta.get("calibrated", []))
    net.requantize()
    net.origin = "checkpoint"
    return net
