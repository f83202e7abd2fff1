"""Mixed-type denoising diffusion: Gaussian forward/reverse over the
numerical block, uniform-mixing multinomial forward/reverse per categorical
feature, denoiser training, and classifier-guided counterfactual generation
with k diverse chains per query.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import container, nn

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta timetable; alpha_bar[0] = 1 by the empty-product convention."""

    betas: np.ndarray       # (T+1,), betas[0] unused
    alpha_bar: np.ndarray   # (T+1,), strictly decreasing after 0

    @property
    def T(self) -> int:
        return len(self.betas) - 1


def build_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"need at least 2 steps, got {T}")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ValueError(f"invalid beta bounds ({beta_min}, {beta_max})")
    betas = np.zeros(T + 1)
    betas[1:] = np.linspace(beta_min, beta_max, T)
    alpha_bar = np.ones(T + 1)
    alpha_bar[1:] = np.cumprod(1.0 - betas[1:])
    if alpha_bar[-1] >= 0.01:
        log.warning("schedule is weakly mixed: alpha_bar_T = %.4g >= 0.01", alpha_bar[-1])
    return NoiseSchedule(betas, alpha_bar)


def scaled_schedule(T: int, ref_T: int = 2500, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Default endpoints hold at ref_T and scale with 1/T to keep the total
    noise budget roughly constant for shorter timetables."""
    scale = ref_T / T
    return build_schedule(T, beta_min * scale, min(beta_max * scale, 0.999))


# ---------------------------------------------------------------------------
# forward processes
# ---------------------------------------------------------------------------

def forward_numerical(schedule, x0, t, eps=None, rng=None):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    if eps is None:
        eps = (rng or np.random.default_rng()).standard_normal(x0.shape)
    ab = np.asarray(schedule.alpha_bar)[np.asarray(t)]
    ab = np.reshape(ab, (-1,) + (1,) * (x0.ndim - 1)) if np.ndim(t) else ab
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_categorical_probs(schedule, codes, t, K):
    """Mixture alpha_bar_t * onehot(x0) + (1 - alpha_bar_t)/K, one row per code."""
    codes = np.atleast_1d(np.asarray(codes, dtype=np.int64))
    ab = float(np.asarray(schedule.alpha_bar)[t]) if np.ndim(t) == 0 else None
    n = len(codes)
    if ab is None:
        ab_col = np.asarray(schedule.alpha_bar)[np.asarray(t)][:, None]
    else:
        ab_col = np.full((n, 1), ab)
    probs = np.full((n, K), 1.0 / K) * (1.0 - ab_col)
    probs[np.arange(n), codes] += ab_col[:, 0]
    return probs


def forward_categorical(schedule, codes, t, K, rng=None, u=None):
    """Sample a noised category per row from the uniform-mixing forward."""
    probs = forward_categorical_probs(schedule, codes, t, K)
    if u is None:
        u = (rng or np.random.default_rng()).random(len(probs))
    return sample_categorical(probs, u)


def sample_categorical(probs, u):
    cdf = np.cumsum(probs, axis=1)
    return np.minimum((u[:, None] > cdf).sum(axis=1), probs.shape[1] - 1).astype(np.int32)


def onehot(codes, cat_sizes) -> np.ndarray:
    n = len(codes)
    blocks = []
    for j, K in enumerate(cat_sizes):
        block = np.zeros((n, K), dtype=np.float32)
        block[np.arange(n), np.asarray(codes[:, j], dtype=np.int64)] = 1.0
        blocks.append(block)
    return (
        np.concatenate(blocks, axis=1)
        if blocks
        else np.zeros((n, 0), dtype=np.float32)
    )


# ---------------------------------------------------------------------------
# denoiser
# ---------------------------------------------------------------------------

@dataclass
class TabularDenoiser:
    """Dense net over [encoded row | timestep embedding] with a noise head
    for the numerical block and one logits head per categorical feature.

    alpha_bar/t_values describe the model's sampling grid; distilled models
    keep a coarse subset of the teacher grid with the original timestep
    values for the embeddings.
    """

    net: nn.DenseNet
    n_num: int
    cat_sizes: tuple[int, ...]
    t_dim: int
    alpha_bar: np.ndarray
    t_values: np.ndarray
    predicts: str = "eps"
    lineage: tuple = ()
    train_curve: list = field(default_factory=list, repr=False)

    @property
    def steps(self) -> int:
        return len(self.alpha_bar) - 1

    @property
    def encoded_width(self) -> int:
        return self.n_num + sum(self.cat_sizes)

    def head_slices(self):
        slices, start = [], self.n_num
        for K in self.cat_sizes:
            slices.append(slice(start, start + K))
            start += K
        return slices

    def net_input(self, x_enc, t_idx):
        t_idx = np.full(len(x_enc), t_idx, dtype=np.int64) if np.ndim(t_idx) == 0 else t_idx
        emb = nn.timestep_embedding(self.t_values[t_idx], self.t_dim)
        return np.concatenate([np.asarray(x_enc, dtype=np.float32), emb], axis=1)

    def predict(self, x_enc, t_idx):
        """Returns (numerical head, [logits per categorical feature])."""
        out = nn.forward(self.net, self.net_input(x_enc, t_idx))
        return out[:, : self.n_num], [out[:, sl] for sl in self.head_slices()]

    def save(self, path, schema_hash: str | None = None) -> None:
        meta = {
            "sizes": [self.net.input_dim] + [l.w.shape[1] for l in self.net.layers],
            "activations": [l.activation for l in self.net.layers],
            "n_num": self.n_num,
            "cat_sizes": list(self.cat_sizes),
            "t_dim": self.t_dim,
            "predicts": self.predicts,
            "lineage": list(self.lineage),
            "grid_len": len(self.alpha_bar),
            "schema_hash": schema_hash,
        }
        arrays = []
        for i, layer in enumerate(self.net.layers):
            arrays.append((f"w{i}", layer.w))
            arrays.append((f"b{i}", layer.b))
        arrays += [("alpha_bar", self.alpha_bar), ("t_values", self.t_values)]
        container.save(path, "denoiser", meta, arrays)

    @classmethod
    def load(cls, path) -> "TabularDenoiser":
        kind, meta, arrays = container.load(path)
        if kind != "denoiser":
            raise container.ContainerError(f"{path}: expected denoiser, got {kind}")
        alpha_bar = arrays.pop("alpha_bar").astype(np.float64)
        t_values = arrays.pop("t_values").astype(np.float64)
        net = container.net_from_arrays(meta, arrays)
        den = cls(
            net,
            meta["n_num"],
            tuple(meta["cat_sizes"]),
            meta["t_dim"],
            alpha_bar,
            t_values,
            meta["predicts"],
            tuple(tuple(x) if isinstance(x, list) else x for x in meta["lineage"]),
        )
        den.schema_hash = meta.get("schema_hash")
        return den


@dataclass
class DenoiserConfig:
    hidden: tuple[int, ...] = (256, 256)
    t_dim: int = 32
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 256


def diffuse_rows(x_num0, codes0, alpha_bar_t, cat_sizes, eps, u_cat):
    """Noise a batch to per-row levels alpha_bar_t using supplied draws."""
    ab = alpha_bar_t[:, None]
    x_t = np.sqrt(ab) * x_num0 + np.sqrt(1.0 - ab) * eps
    codes_t = np.empty_like(codes0)
    for j, K in enumerate(cat_sizes):
        probs = np.full((len(codes0), K), 1.0 / K) * (1.0 - ab)
        probs[np.arange(len(codes0)), codes0[:, j]] += ab[:, 0]
        codes_t[:, j] = sample_categorical(probs, u_cat[:, j])
    return x_t, codes_t


def train_denoiser(dataset, preprocessor, schedule, cfg: DenoiserConfig, seed: int) -> TabularDenoiser:
    """Train the epsilon/logits denoiser: MSE on the numerical noise plus
    cross entropy of each categorical head against the clean category, with
    t drawn uniformly per example."""
    rng = np.random.default_rng(seed)
    X = preprocessor.encode_dataset(dataset)
    n_num, cat_sizes = preprocessor.n_num, preprocessor.cat_sizes
    x_num0 = X[:, :n_num].astype(np.float64)
    codes0 = dataset.cat

    in_dim = preprocessor.encoded_width + cfg.t_dim
    out_dim = preprocessor.encoded_width
    net = nn.build_net(
        (in_dim, *cfg.hidden, out_dim),
        ["relu"] * len(cfg.hidden) + ["identity"],
        seed=rng.integers(2**31),
    )
    den = TabularDenoiser(
        net, n_num, cat_sizes, cfg.t_dim,
        schedule.alpha_bar.copy(), np.arange(schedule.T + 1, dtype=np.float64),
    )
    state = nn.adam_init(nn.net_params(net), lr=cfg.lr)
    slices = den.head_slices()
    n_cat = max(len(cat_sizes), 1)
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for idx in nn.iterate_minibatches(len(X), cfg.batch_size, rng):
            b = len(idx)
            t = rng.integers(1, schedule.T + 1, size=b)
            eps = rng.standard_normal((b, n_num))
            u = rng.random((b, len(cat_sizes)))
            x_t, codes_t = diffuse_rows(
                x_num0[idx], codes0[idx], schedule.alpha_bar[t], cat_sizes, eps, u
            )
            x_enc = np.concatenate([x_t.astype(np.float32), onehot(codes_t, cat_sizes)], axis=1)
            out = nn.forward(net, den.net_input(x_enc, t))
            upstream = np.zeros_like(out)
            num_err = out[:, :n_num].astype(np.float64) - eps
            upstream[:, :n_num] = (2.0 * num_err / (b * max(n_num, 1))).astype(np.float32)
            loss = float(np.mean(num_err**2, dtype=np.float64)) if n_num else 0.0
            for j, sl in enumerate(slices):
                probs = nn.softmax(out[:, sl].astype(np.float64))
                target = np.zeros_like(probs)
                target[np.arange(b), codes0[idx, j]] = 1.0
                loss += float(
                    -np.mean(np.log(probs[np.arange(b), codes0[idx, j]] + 1e-30)) / n_cat
                )
                upstream[:, sl] = ((probs - target) / (b * n_cat)).astype(np.float32)
            if not np.isfinite(loss):
                raise nn.TrainingDiverged(f"denoiser loss non-finite at epoch {epoch}")
            grads, _ = nn.backward(net, den.net_input(x_enc, t), upstream)
            nn.adam_step(state, nn.net_params(net), grads)
            epoch_loss += loss * b
        den.train_curve.append(epoch_loss / len(X))
        if epoch % max(1, cfg.epochs // 10) == 0:
            log.debug("denoiser epoch %d loss %.5f", epoch, den.train_curve[-1])
    return den


# ---------------------------------------------------------------------------
# reverse process
# ---------------------------------------------------------------------------

def x0_from_prediction(den: TabularDenoiser, x_num, head, j: int, clip: float):
    """Implied clean-numerical estimate from an eps or v prediction."""
    ab = den.alpha_bar[j]
    if den.predicts == "eps":
        x0 = (x_num - np.sqrt(1.0 - ab) * head) / np.sqrt(ab)
    else:
        x0 = np.sqrt(ab) * x_num - np.sqrt(1.0 - ab) * head
    return np.clip(x0, -clip, clip)


def categorical_posterior(alpha: float, ab_prev: float, codes_col, p0, K: int):
    """q(x_{t-1} | x_t, x0_hat) for the uniform-mixing multinomial forward;
    rows sum to 1."""
    n = len(codes_col)
    fac1 = np.full((n, K), (1.0 - alpha) / K)
    fac1[np.arange(n), np.asarray(codes_col, dtype=np.int64)] += alpha
    fac2 = ab_prev * p0 + (1.0 - ab_prev) / K
    theta = fac1 * fac2
    return theta / theta.sum(axis=1, keepdims=True)


def _step(den, x_num, codes, j, num_head, p0_list, noise, u_cat, clip):
    """One reverse step given the model outputs; noise/u_cat are consumed
    only for j > 1 (the terminal step is deterministic)."""
    ab, ab_prev = den.alpha_bar[j], den.alpha_bar[j - 1]
    alpha = ab / ab_prev
    beta = 1.0 - alpha
    x0_hat = x0_from_prediction(den, x_num, num_head, j, clip)
    mean = (np.sqrt(ab_prev) * beta * x0_hat + np.sqrt(alpha) * (1.0 - ab_prev) * x_num) / (1.0 - ab)
    if j > 1:
        beta_tilde = (1.0 - ab_prev) / (1.0 - ab) * beta
        x_next = mean + np.sqrt(beta_tilde) * noise
    else:
        x_next = mean
    codes_next = np.empty_like(codes)
    for i, K in enumerate(den.cat_sizes):
        theta = categorical_posterior(alpha, ab_prev, codes[:, i], p0_list[i], K)
        if j > 1:
            codes_next[:, i] = sample_categorical(theta, u_cat[:, i])
        else:
            codes_next[:, i] = np.argmax(theta, axis=1)
    return x_next, codes_next


def reverse_step(den: TabularDenoiser, x_num, codes, j: int, rng, clip: float = 6.0):
    """Sample x_{t-1} from x_t on the model's grid (deterministic at j = 1)."""
    x_num = np.asarray(x_num, dtype=np.float64)
    x_enc = np.concatenate([x_num.astype(np.float32), onehot(codes, den.cat_sizes)], axis=1)
    num_head, logits = den.predict(x_enc, j)
    p0 = [nn.softmax(l.astype(np.float64)) for l in logits]
    noise = u = None
    if j > 1:
        noise = rng.standard_normal(x_num.shape)
        u = rng.random((len(x_num), len(den.cat_sizes)))
    return _step(den, x_num, codes, j, num_head.astype(np.float64), p0, noise, u, clip)


def sample_unconditional(den: TabularDenoiser, n: int, seed: int, clip: float = 6.0):
    """Unguided draws from the prior through the full reverse chain."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, den.n_num))
    codes = np.column_stack(
        [rng.integers(0, K, size=n) for K in den.cat_sizes]
    ).astype(np.int32) if den.cat_sizes else np.zeros((n, 0), dtype=np.int32)
    for j in range(den.steps, 0, -1):
        x, codes = reverse_step(den, x, codes, j, rng, clip)
    return x, codes


# ---------------------------------------------------------------------------
# guidance
# ---------------------------------------------------------------------------

@dataclass
class GuidanceConfig:
    alpha: float = 1.0        # guidance scale on the normalized loss gradient
    lam: float = 0.5          # weight of the L1 anchor to the query
    k: int = 10               # diverse chains per query
    tau: int | None = None    # start noise level on the model grid (None = top)
    clip: float = 6.0         # per-step clamp bound on implied x0
    normalize_grad: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.alpha < 0:
            raise ValueError("guidance scale must be >= 0")


@dataclass
class CounterfactualBatch:
    """k candidate explanations for one attack query, in original units."""

    query_id: int
    query_num: np.ndarray
    query_cat: np.ndarray
    cand_num: np.ndarray   # (k, n_num)
    cand_cat: np.ndarray   # (k, n_cat)
    validity: np.ndarray   # (k,) bool
    prob: np.ndarray       # (k,) black-box attack probability
    seconds: float

    @property
    def k(self) -> int:
        return len(self.validity)

    @property
    def n_valid(self) -> int:
        return int(self.validity.sum())


def cf_loss(guidance, x_enc, t_value, y_cf, x_orig_enc, lam):
    """Counterfactual loss BCE(f(x_t, t), y_cf) + lam * |x_t - x_orig|_1 and
    its gradient w.r.t. x_t (L1 subgradient, 0 at exact ties)."""
    x64 = np.asarray(x_enc, dtype=np.float64)
    p, gx = guidance.bce_input_grad(x_enc, t_value, y_cf)
    bce, _ = nn.bce_loss(p, y_cf)
    diff = x64 - np.asarray(x_orig_enc, dtype=np.float64)
    loss = bce + lam * np.abs(diff).sum(axis=1)
    grad = gx.astype(np.float64) + lam * np.sign(diff)
    return loss, grad


def _chain_rngs(seed, query_ids, k):
    return [
        np.random.default_rng([int(seed), int(qid), c])
        for qid in query_ids
        for c in range(k)
    ]


def _stack_normal(rngs, dim):
    return np.stack([r.standard_normal(dim) for r in rngs])


def _stack_uniform(rngs, dim):
    return np.stack([r.random(dim) for r in rngs])


def _run_chains(den, guidance, cfg, x0_enc, rngs, y_cf):
    """Reverse-diffuse len(rngs) chains from the noised queries; x0_enc has
    one row per chain. Returns the final encoded rows."""
    n_num, cat_sizes = den.n_num, den.cat_sizes
    n_cat = len(cat_sizes)
    tau = cfg.tau if cfg.tau is not None else den.steps
    if not (1 <= tau <= den.steps):
        raise ValueError(f"tau {tau} outside the model grid [1, {den.steps}]")
    x_orig = x0_enc.astype(np.float64)
    x0_num = x_orig[:, :n_num]
    # noise the encoded query to level tau
    ab_tau = den.alpha_bar[tau]
    eps0 = _stack_normal(rngs, n_num)
    u0 = _stack_uniform(rngs, n_cat)
    x = np.sqrt(ab_tau) * x0_num + np.sqrt(1.0 - ab_tau) * eps0
    codes = np.empty((len(rngs), n_cat), dtype=np.int32)
    start = n_num
    for i, K in enumerate(cat_sizes):
        c0 = np.argmax(x0_enc[:, start : start + K], axis=1)
        probs = np.full((len(rngs), K), (1.0 - ab_tau) / K)
        probs[np.arange(len(rngs)), c0] += ab_tau
        codes[:, i] = sample_categorical(probs, u0[:, i])
        start += K

    slices = den.head_slices()
    for j in range(tau, 0, -1):
        x_enc = np.concatenate([x.astype(np.float32), onehot(codes, cat_sizes)], axis=1)
        if guidance is not None:
            _, g = cf_loss(guidance, x_enc, den.t_values[j], y_cf, x_orig, cfg.lam)
            if cfg.normalize_grad:
                g = g / (np.linalg.norm(g, axis=1, keepdims=True) + 1e-12)
        else:
            g = np.zeros_like(x_orig)
        num_head, logits = den.predict(x_enc, j)
        p0 = [
            nn.softmax(l.astype(np.float64) - cfg.alpha * g[:, sl])
            for l, sl in zip(logits, slices)
        ]
        noise = u = None
        if j > 1:
            noise = _stack_normal(rngs, n_num)
            u = _stack_uniform(rngs, n_cat)
        x, codes = _step(den, x, codes, j, num_head.astype(np.float64), p0, noise, u, cfg.clip)
        x = x - cfg.alpha * g[:, :n_num]
    return np.concatenate([x.astype(np.float32), onehot(codes, cat_sizes)], axis=1)


def generate_pool(
    num,
    cat,
    y_cf,
    den,
    guidance,
    cfg: GuidanceConfig,
    preprocessor,
    blackbox,
    seed: int,
    query_ids=None,
    chunk: int = 32,
    jobs: int = 1,
) -> list[CounterfactualBatch]:
    """Guided generation for a pool of queries.

    Chains are keyed by (seed, query id, chain index); chunking and the
    thread count never change which random stream feeds which chain, so any
    job count yields identical batches for a fixed chunk size.
    """
    q = len(num)
    ids = np.arange(q) if query_ids is None else np.asarray(query_ids)
    X0 = preprocessor.encode(num, cat)
    spans = [(s, min(s + chunk, q)) for s in range(0, q, chunk)]

    def run_span(span):
        lo, hi = span
        t0 = time.perf_counter()
        rngs = _chain_rngs(seed, ids[lo:hi], cfg.k)
        rows = np.repeat(X0[lo:hi], cfg.k, axis=0)
        final = _run_chains(den, guidance, cfg, rows, rngs, y_cf)
        return final, time.perf_counter() - t0

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_span, spans))
    else:
        results = [run_span(s) for s in spans]

    batches = []
    for (lo, hi), (final, elapsed) in zip(spans, results):
        cand_num, cand_cat = preprocessor.decode(final)
        probs = blackbox.predict_proba(preprocessor.encode(cand_num, cand_cat))
        per_query = elapsed / (hi - lo)
        for qi in range(lo, hi):
            rows = slice((qi - lo) * cfg.k, (qi - lo + 1) * cfg.k)
            p = probs[rows]
            batches.append(
                CounterfactualBatch(
                    query_id=int(ids[qi]),
                    query_num=num[qi].copy(),
                    query_cat=cat[qi].copy(),
                    cand_num=cand_num[rows],
                    cand_cat=cand_cat[rows],
                    validity=(p < 0.5) if y_cf == 0 else (p >= 0.5),
                    prob=p,
                    seconds=per_query,
                )
            )
    return batches


def guided_generate(
    query_num, query_cat, y_cf, den, guidance, cfg, preprocessor, blackbox, seed, query_id=0
) -> CounterfactualBatch:
    """Single-query entry point; equivalent to a pool of one."""
    return generate_pool(
        np.asarray(query_num)[None],
        np.asarray(query_cat)[None],
        y_cf,
        den,
        guidance,
        cfg,
        preprocessor,
        blackbox,
        seed,
        query_ids=[query_id],
    )[0]


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

def _format_row(schema, num_row, cat_row):
    cells = []
    n_idx = c_idx = 0
    for f in schema.features:
        if f.kind == "numerical":
            cells.append(repr(float(num_row[n_idx])))
            n_idx += 1
        else:
            cells.append(f.categories[int(cat_row[c_idx])])
            c_idx += 1
    return cells


def write_batches_csv(batches, schema, path, times_path=None) -> None:
    """Candidates in original units, one row per chain; wall-times go to a
    separate sidecar so the main file is byte-stable across runs."""
    header = ["query_id", "chain_id"] + list(schema.names) + ["valid", "probability"]
    lines = [",".join(header)]
    for batch in batches:
        for c in range(batch.k):
            cells = [str(batch.query_id), str(c)]
            cells += _format_row(schema, batch.cand_num[c], batch.cand_cat[c])
            cells += [str(int(batch.validity[c])), repr(float(batch.prob[c]))]
            lines.append(",".join(cells))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    if times_path is not None:
        with open(times_path, "w", newline="") as fh:
            fh.write("query_id,seconds\n")
            for batch in batches:
                fh.write(f"{batch.query_id},{batch.seconds!r}\n")


def write_queries_csv(batches, schema, path) -> None:
    header = ["query_id"] + list(schema.names)
    lines = [",".join(header)]
    for batch in batches:
        cells = [str(batch.query_id)] + _format_row(schema, batch.query_num, batch.query_cat)
        lines.append(",".join(cells))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
