"""Graph VAE: ECC encoder with gated pooling, MLP decoder to a probabilistic
graph, matched reconstruction loss and training loop."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, BatchNorm, Tensor
from .graph import DiscreteGraph, GraphLabel, ProbabilisticGraph
from .matching import DEFAULT_ITERATIONS, assignment_to_perm, match_batch


@dataclass(frozen=True)
class EncoderConfig:
    conv_channels: tuple = (32, 64)
    pooling_hidden: int = 128
    latent_dim: int = 40
    aggregation: str = "mean"

    def __post_init__(self):
        if min(self.conv_channels) < 1 or self.pooling_hidden < 1 or self.latent_dim < 1:
            raise ValueError("channel counts must be >= 1")
        if self.aggregation not in ("mean", "sum"):
            raise ValueError("aggregation must be 'mean' or 'sum'")


@dataclass(frozen=True)
class DecoderConfig:
    k: int = 9
    d_e: int = 4
    d_n: int = 4
    hidden_channels: tuple = (128, 256, 512)
    implicit_node_prob: bool = False
    conditional: bool = False

    @property
    def n_triangle(self) -> int:
        return self.k * (self.k + 1) // 2

    @property
    def label_dim(self) -> int:
        return self.d_n if self.conditional else 0


@dataclass(frozen=True)
class LossWeights:
    lambda_a: float = 1.0
    lambda_e: float = 1.0
    lambda_f: float = 1.0
    kl_weight: float = 1.0

    def __post_init__(self):
        if min(self.lambda_a, self.lambda_e, self.lambda_f, self.kl_weight) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LatentPosterior:
    mu: np.ndarray
    sigma: np.ndarray


# -- building blocks -------------------------------------------------------------

def glorot(rng: np.random.Generator, n_in: int, n_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, shape or (n_in, n_out))


def pad_graphs(graphs, size: int | None = None):
    """Stack graphs into padded arrays: features, edge tensor, degree, mask."""
    size = size or max(1, max(g.n for g in graphs))
    B = len(graphs)
    d_e, d_n = graphs[0].d_e, graphs[0].d_n
    F = np.zeros((B, size, d_n))
    E = np.zeros((B, size, size, d_e))
    mask = np.zeros((B, size))
    for b, g in enumerate(graphs):
        F[b, :g.n] = g.F
        E[b, :g.n, :g.n] = g.E
        mask[b, :g.n] = 1
    deg = E.sum(axis=(2, 3))
    return F, E, deg, mask


def ecc_layer(H: Tensor, E: np.ndarray, deg: np.ndarray, w_self: Tensor, b_self: Tensor,
              w_edge: Tensor, aggregation: str = "mean") -> Tensor:
    """Edge-conditioned convolution with one generated weight matrix per edge class.

    ``H`` is (B, N, C_in), ``E`` the one-hot edge tensor (B, N, N, d_e) and
    ``w_edge`` (C_in, d_e * C_out): the filter network is linear in the
    one-hot edge attribute, so edge class t selects block t.  Each node adds
    its own linear transform to the aggregated neighbour messages.
    """
    B, N, _ = H.shape
    d_e = E.shape[3]
    c_out = w_self.shape[1]
    if w_edge.shape != (H.shape[2], d_e * c_out):
        raise ValueError(f"edge filter shape {w_edge.shape} does not fit input {H.shape} / d_e={d_e}")
    out = H @ w_self + b_self
    msgs = (H @ w_edge).reshape(B, N * d_e, c_out)
    norm = np.maximum(deg, 1.0)[:, :, None] if aggregation == "mean" else 1.0
    Emat = E.reshape(B, N, N * d_e) / norm
    return out + ad.matmul(Tensor(Emat), msgs)


def gated_pool(H: Tensor, mask: np.ndarray, w_gate: Tensor, b_gate: Tensor,
               w_val: Tensor, b_val: Tensor) -> Tensor:
    """Sum over real nodes of sigmoid(gate(h)) * tanh(value(h)); (B, N, C) -> (B, hidden)."""
    if not np.all(mask.sum(axis=1) > 0):
        raise ValueError("gated pooling of an empty graph")
    gate = ad.sigmoid(H @ w_gate + b_gate)
    val = ad.tanh(H @ w_val + b_val)
    return (gate * val * mask[:, :, None]).sum(axis=1)


def reparameterize(mu: Tensor, sigma: Tensor, rng: np.random.Generator) -> Tensor:
    eps = rng.standard_normal(mu.shape)
    return mu + sigma * eps


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) per row."""
    return 0.5 * (mu * mu + ad.exp(logvar) - 1.0 - logvar).sum(axis=-1)


def kl_divergence_np(mu, sigma) -> float:
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    return float(0.5 * np.sum(mu ** 2 + sigma ** 2 - 1.0 - 2.0 * np.log(sigma)))


def triangle_index(k: int) -> np.ndarray:
    """k x k array of positions into the row-major upper triangle (with diagonal)."""
    idx = np.zeros((k, k), dtype=int)
    pos = 0
    for a in range(k):
        for b in range(a, k):
            idx[a, b] = idx[b, a] = pos
            pos += 1
    return idx


# -- reconstruction loss ---------------------------------------------------------

def reconstruction_terms(graphs, A: Tensor, E: Tensor, F: Tensor, Xs, weights: LossWeights) -> Tensor:
    """Per-sample negative log-likelihood ``-log p(G | z)``, shape (B,).

    ``A``, ``E``, ``F`` are the batched predicted tensors (B, k, k),
    (B, k, k, d_e), (B, k, d_n).  The assignments ``Xs`` are constants.
    """
    B, k = A.shape[0], A.shape[1]
    targets = np.zeros((B, k, k))
    f_idx, e_idx = [], []
    f_w, e_w = [], []
    for b, (g, X) in enumerate(zip(graphs, Xs)):
        X = np.asarray(X)
        if X.shape != (k, g.n):
            raise ValueError(f"assignment shape {X.shape} != ({k}, {g.n})")
        perm = assignment_to_perm(X) if g.n else np.zeros(0, dtype=int)
        targets[b] = X @ g.A @ X.T
        cls = g.node_classes
        for i in range(g.n):
            f_idx.append((b, perm[i], cls[i]))
            f_w.append((b, 1.0 / g.n))
        n_slots = int(g.A.sum()) - g.n
        for i, j in zip(*np.nonzero(g.A - np.eye(g.n))):
            e_idx.append((b, perm[i], perm[j], int(g.E[i, j].argmax())))
            e_w.append((b, 1.0 / n_slots))

    eye = np.eye(k)
    wa = eye / k
    if k > 1:
        wa = wa + (1 - eye) / (k * (k - 1))
    p_true = A * targets + (1.0 - A) * (1.0 - targets)
    term_a = (ad.log(p_true) * wa).sum(axis=(1, 2))
    total = term_a * (-weights.lambda_a)

    for idx, w, tensor, lam in ((f_idx, f_w, F, weights.lambda_f), (e_idx, e_w, E, weights.lambda_e)):
        if not idx:
            continue
        cols = tuple(np.array(c) for c in zip(*idx))
        vals = ad.log(tensor[cols])
        seg = np.zeros((B, len(idx)))
        for m, (b, wt) in enumerate(w):
            seg[b, m] = wt
        term = ad.matmul(Tensor(seg), vals.reshape(-1, 1)).reshape(B)
        total = total + term * (-lam)
    return total


def reconstruction_loss(g: DiscreteGraph, pg: ProbabilisticGraph, X, weights: LossWeights = LossWeights()) -> float:
    """``-log p(G | z)`` for one graph against a fixed probabilistic graph."""
    if (g.d_e, g.d_n) != (pg.d_e, pg.d_n):
        raise ValueError("attribute dims differ")
    out = reconstruction_terms([g], Tensor(pg.A[None]), Tensor(pg.E[None]), Tensor(pg.F[None]), [X], weights)
    return float(out.data[0])


# -- the model -------------------------------------------------------------------

class GraphVAE:
    """Encoder/decoder pair plus the parameters and batchnorm state they own."""

    def __init__(self, encoder: EncoderConfig = EncoderConfig(), decoder: DecoderConfig = DecoderConfig(),
                 deterministic: bool = False, seed: int = 0):
        self.encoder_cfg = encoder
        self.decoder_cfg = decoder
        self.deterministic = deterministic
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.norms: dict[str, BatchNorm] = {}
        self._tri = triangle_index(decoder.k)
        self._build(np.random.default_rng(seed))

    # parameters ---------------------------------------------------------------

    def _param(self, name, value):
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _linear(self, rng, name, n_in, n_out):
        self._param(f"{name}.w", glorot(rng, n_in, n_out))
        self._param(f"{name}.b", np.zeros(n_out))

    def _norm(self, name, channels):
        bn = BatchNorm(channels)
        self.norms[name] = bn
        self.params[f"{name}.gamma"] = bn.gamma
        self.params[f"{name}.beta"] = bn.beta

    def _build(self, rng):
        enc, dec = self.encoder_cfg, self.decoder_cfg
        c_in = dec.d_n
        for l, c_out in enumerate(enc.conv_channels):
            self._param(f"enc.conv{l}.w_self", glorot(rng, c_in, c_out))
            self._param(f"enc.conv{l}.b_self", np.zeros(c_out))
            self._param(f"enc.conv{l}.w_edge", glorot(rng, c_in, c_out, (c_in, dec.d_e * c_out)))
            self._norm(f"enc.conv{l}.bn", c_out)
            if c_in != c_out:
                self._param(f"enc.conv{l}.w_skip", glorot(rng, c_in, c_out))
            c_in = c_out
        c_pool = c_in + dec.label_dim
        self._linear(rng, "enc.gate", c_pool, enc.pooling_hidden)
        self._linear(rng, "enc.value", c_pool, enc.pooling_hidden)
        self._linear(rng, "enc.out", enc.pooling_hidden, 2 * enc.latent_dim)

        h = enc.latent_dim + dec.label_dim
        for l, c_out in enumerate(dec.hidden_channels):
            self._linear(rng, f"dec.fc{l}", h, c_out)
            self._norm(f"dec.fc{l}.bn", c_out)
            h = c_out
        self._linear(rng, "dec.adj", h, dec.n_triangle)
        self._linear(rng, "dec.edge", h, dec.n_triangle * dec.d_e)
        self._linear(rng, "dec.node", h, dec.k * dec.d_n)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_weights(self):
        """Set every parameter to zero (batchnorm scales included)."""
        for p in self.params.values():
            p.data = np.zeros_like(p.data)
        return self

    # forward ------------------------------------------------------------------

    def _labels(self, labels, B):
        if not self.decoder_cfg.conditional:
            if labels is not None and any(y is not None for y in labels):
                raise ValueError("labels given to an unconditional model")
            return None
        if labels is None or len(labels) != B or any(y is None for y in labels):
            raise ValueError("a conditional model needs one label per sample")
        Y = np.stack([y.as_array() if isinstance(y, GraphLabel) else np.asarray(y, float) for y in labels])
        if Y.shape[1] != self.decoder_cfg.d_n:
            raise ValueError(f"label dim {Y.shape[1]} != {self.decoder_cfg.d_n}")
        return Y

    def encode_tensors(self, graphs, labels=None, training: bool = False):
        """Return ``(mu, logvar)`` tensors of shape (B, c)."""
        enc, dec = self.encoder_cfg, self.decoder_cfg
        for g in graphs:
            if (g.d_e, g.d_n) != (dec.d_e, dec.d_n):
                raise ValueError("graph attribute dims do not match the model")
        Y = self._labels(labels, len(graphs))
        F, E, deg, mask = pad_graphs(graphs)
        B, N = mask.shape
        flat_mask = mask.reshape(-1)
        P = self.params
        H = Tensor(F)
        for l, c_out in enumerate(enc.conv_channels):
            name = f"enc.conv{l}"
            conv = ecc_layer(H, E, deg, P[f"{name}.w_self"], P[f"{name}.b_self"], P[f"{name}.w_edge"],
                             enc.aggregation)
            conv = self.norms[f"{name}.bn"](conv.reshape(B * N, c_out), training, flat_mask)
            skip = H if f"{name}.w_skip" not in P else H @ P[f"{name}.w_skip"]
            H = (ad.relu(conv).reshape(B, N, c_out) + skip) * mask[:, :, None]
        if Y is not None:
            H = ad.concat([H, Tensor(np.broadcast_to(Y[:, None, :], (B, N, Y.shape[1])))], axis=2)
        pooled = gated_pool(H, mask, P["enc.gate.w"], P["enc.gate.b"], P["enc.value.w"], P["enc.value.b"])
        out = pooled @ P["enc.out.w"] + P["enc.out.b"]
        c = enc.latent_dim
        return out[:, :c], out[:, c:]

    def decode_tensors(self, z: Tensor, labels=None, training: bool = False):
        """Return batched ``(A, E, F)`` tensors of the probabilistic graphs."""
        dec = self.decoder_cfg
        z = ad.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != self.encoder_cfg.latent_dim:
            raise ValueError(f"latent batch must be (B, {self.encoder_cfg.latent_dim}), got {z.shape}")
        B, k = z.shape[0], dec.k
        Y = self._labels(labels, B)
        h = z if Y is None else ad.concat([z, Tensor(Y)], axis=1)
        P = self.params
        for l in range(len(dec.hidden_channels)):
            h = h @ P[f"dec.fc{l}.w"] + P[f"dec.fc{l}.b"]
            h = ad.relu(self.norms[f"dec.fc{l}.bn"](h, training))
        a_tri = ad.sigmoid(h @ P["dec.adj.w"] + P["dec.adj.b"])
        e_tri = ad.softmax((h @ P["dec.edge.w"] + P["dec.edge.b"]).reshape(B, dec.n_triangle, dec.d_e), axis=2)
        F = ad.softmax((h @ P["dec.node.w"] + P["dec.node.b"]).reshape(B, k, dec.d_n), axis=2)
        A = a_tri[:, self._tri]
        E = e_tri[:, self._tri]
        if dec.implicit_node_prob:
            A = implicit_node_probabilities(A)
        return A, E, F

    # numpy-facing API -----------------------------------------------------------

    def encode(self, graphs, labels=None) -> LatentPosterior:
        """Posterior parameters in inference mode, arrays of shape (B, c)."""
        mu, logvar = self.encode_tensors(graphs, labels, training=False)
        sigma = np.zeros_like(mu.data) if self.deterministic else np.exp(0.5 * logvar.data)
        return LatentPosterior(mu.data, sigma)

    def decode(self, z, labels=None) -> list[ProbabilisticGraph]:
        A, E, F = self.decode_tensors(Tensor(np.atleast_2d(z)), labels, training=False)
        return [ProbabilisticGraph(A.data[b], E.data[b], F.data[b]) for b in range(A.shape[0])]

    def loss(self, graphs, labels, weights: LossWeights, rng: np.random.Generator, training: bool,
             iterations: int = DEFAULT_ITERATIONS, z_noise: bool = True, threads: int = 1):
        """Batch-mean objective and per-sample (reconstruction, KL) arrays."""
        mu, logvar = self.encode_tensors(graphs, labels, training)
        if self.deterministic or not z_noise:
            z = mu
        else:
            z = reparameterize(mu, ad.exp(logvar * 0.5), rng)
        A, E, F = self.decode_tensors(z, labels, training)
        pgs = [ProbabilisticGraph(A.data[b], E.data[b], F.data[b]) for b in range(len(graphs))]
        Xs = match_batch(list(zip(graphs, pgs)), iterations, threads)
        recon = reconstruction_terms(graphs, A, E, F, Xs, weights)
        kl = Tensor(np.zeros(len(graphs))) if self.deterministic else kl_divergence(mu, logvar)
        if self.deterministic or weights.kl_weight == 0:
            total = recon.mean()
        else:
            total = (recon + kl * weights.kl_weight).mean()
        return total, recon.data.copy(), kl.data.copy()

    # persistence ----------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        for name, bn in self.norms.items():
            for key, arr in bn.buffers().items():
                out[f"{name}.{key}"] = arr
        return out

    def config_dict(self) -> dict:
        return {"encoder": asdict(self.encoder_cfg), "decoder": asdict(self.decoder_cfg),
                "deterministic": self.deterministic, "seed": self.seed}

    def save(self, path, extra: dict | None = None):
        save_checkpoint(path, self.config_dict(), self.state(), extra)

    @classmethod
    def load(cls, path) -> "GraphVAE":
        header, tensors = load_checkpoint(path)
        cfg = header["config"]
        enc = cfg["encoder"]
        enc["conv_channels"] = tuple(enc["conv_channels"])
        dec = cfg["decoder"]
        dec["hidden_channels"] = tuple(dec["hidden_channels"])
        model = cls(EncoderConfig(**enc), DecoderConfig(**dec), cfg["deterministic"], cfg["seed"])
        model.load_state(tensors)
        return model

    def load_state(self, tensors: dict[str, np.ndarray]):
        for name, p in self.params.items():
            if tensors[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = tensors[name].copy()
        for name, bn in self.norms.items():
            bn.running_mean = tensors[f"{name}.running_mean"].copy()
            bn.running_var = tensors[f"{name}.running_var"].copy()


def implicit_node_probabilities(A: Tensor) -> Tensor:
    """Replace each node probability by its strongest incident edge probability."""
    k = A.shape[-1]
    eye = np.eye(k)
    off = A * (1.0 - eye)
    strongest = off.max(axis=-1)
    return off + ad.reshape(strongest, strongest.shape + (1,)) * eye


# -- checkpoint container ----------------------------------------------------------

_MAGIC = b"GVAECKPT"


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray], extra: dict | None = None):
    """Write ``magic | u64 header length | JSON header | little-endian float64 data``."""
    manifest, offset = [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {"format": 1, "config": config, "tensors": manifest}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path} is not a graphvae checkpoint")
    (size,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + size])
    base = 16 + size
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = base + entry["offset"]
        tensors[entry["name"]] = np.frombuffer(raw[start:start + 8 * count], dtype="<f8").reshape(entry["shape"]).copy()
    return header, tensors


# -- training --------------------------------------------------------------------

@dataclass
class TrainState:
    model: GraphVAE
    optimizer: Adam
    weights: LossWeights
    iterations: int = DEFAULT_ITERATIONS
    threads: int = 1
    history: list = field(default_factory=list)


def make_trainer(model: GraphVAE, weights: LossWeights = LossWeights(), lr: float = 1e-3, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8, iterations: int = DEFAULT_ITERATIONS,
                 threads: int = 1) -> TrainState:
    return TrainState(model, Adam(model.parameters(), lr, beta1, beta2, eps), weights, iterations, threads)


def train_step(state: TrainState, graphs, labels, rng: np.random.Generator) -> float:
    """One optimizer step on a batch; matching is recomputed from scratch."""
    if not graphs:
        raise ValueError("empty batch")
    total, _, _ = state.model.loss(graphs, labels, state.weights, rng, training=True, iterations=state.iterations,
                                  threads=state.threads)
    total.backward()
    state.optimizer.step()
    value = total.item()
    state.history.append(value)
    return value


def elbo(model: GraphVAE, graphs, labels, rng: np.random.Generator, weights: LossWeights = LossWeights(),
         iterations: int = DEFAULT_ITERATIONS, threads: int = 1) -> np.ndarray:
    """Per-graph ELBO ``-(recon + KL)`` with one posterior sample, inference mode."""
    _, recon, kl = model.loss(graphs, labels, LossWeights(weights.lambda_a, weights.lambda_e, weights.lambda_f, 1.0),
                              rng, training=False, iterations=iterations, threads=threads)
    return -(recon + kl)


def reconstruction_nll(model: GraphVAE, graphs, labels, rng, weights: LossWeights = LossWeights(),
                       iterations: int = DEFAULT_ITERATIONS, z_noise: bool = True, threads: int = 1) -> np.ndarray:
    _, recon, _ = model.loss(graphs, labels, weights, rng, training=False, iterations=iterations, z_noise=z_noise,
                             threads=threads)
    return recon
