"""Angular (v) reparameterization of the diffusion process and progressive
distillation: each stage teaches a student to match several deterministic
teacher steps with one step, shrinking the sampling grid by an integer
factor per stage."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .diffusion import TabularDenoiser, diffuse_rows, onehot

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# rotation algebra
# ---------------------------------------------------------------------------

def phi_of_t(schedule, t):
    """Mixing angle with cos(phi) = sqrt(alpha_bar_t), sin(phi) = sqrt(1 - alpha_bar_t)."""
    ab = np.asarray(schedule.alpha_bar)[np.asarray(t)]
    return np.arctan2(np.sqrt(1.0 - ab), np.sqrt(ab))


def v_from_x_eps(x, eps, phi):
    phi = np.asarray(phi)
    return np.cos(phi) * eps - np.sin(phi) * x


def x_eps_from_v(z, v, phi):
    """Invert the rotation: z = cos(phi) x + sin(phi) eps and v back to (x, eps)."""
    phi = np.asarray(phi)
    c, s = np.cos(phi), np.sin(phi)
    return c * z - s * v, s * z + c * v


# ---------------------------------------------------------------------------
# models and plans
# ---------------------------------------------------------------------------

@dataclass
class VDenoiser(TabularDenoiser):
    """Same widths as the eps denoiser; the numerical head predicts v."""

    predicts: str = "v"


@dataclass(frozen=True)
class DistillationPlan:
    factors: tuple[int, ...]

    def __post_init__(self):
        if not self.factors or any(int(f) < 1 for f in self.factors):
            raise ValueError("plan factors must be positive integers")

    def final_steps(self, initial: int) -> int:
        steps = initial
        for f in self.factors:
            if steps % f:
                raise ValueError(f"factor {f} does not divide {steps} steps")
            steps //= f
        return steps


@dataclass
class DistillConfig:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 256
    v_clip: float = 10.0              # bound on teacher-implied v targets
    consistency_bound: float | None = None
    clip: float = 6.0


def _head_upstream(out, n_num, slices, v_target, probs_target, b, n_cat):
    """Upstream gradient for MSE on the v head plus soft cross entropy on the
    categorical heads; returns (loss, upstream)."""
    upstream = np.zeros_like(out)
    err = out[:, :n_num].astype(np.float64) - v_target
    loss = float(np.mean(err**2, dtype=np.float64)) if n_num else 0.0
    upstream[:, :n_num] = (2.0 * err / (b * max(n_num, 1))).astype(np.float32)
    for sl, target in zip(slices, probs_target):
        probs = nn.softmax(out[:, sl].astype(np.float64))
        loss += float(-np.mean(np.sum(target * np.log(probs + 1e-30), axis=1)) / n_cat)
        upstream[:, sl] = ((probs - target) / (b * n_cat)).astype(np.float32)
    return loss, upstream


def convert_to_v(teacher: TabularDenoiser, dataset, preprocessor, cfg: DistillConfig, seed: int) -> VDenoiser:
    """Fine-tune a copy of the eps teacher into a v predictor by regressing
    to the teacher-implied v target (clipped: the eps-to-v change of
    variables divides by cos(phi), which blows up teacher noise at heavily
    mixed levels). Plain v MSE balances implied-x and implied-eps agreement;
    categorical heads keep training on the clean categories and start
    bit-identical to the teacher's."""
    if teacher.predicts != "eps":
        raise ValueError("convert_to_v expects an eps-parameterized teacher")
    rng = np.random.default_rng(seed)
    X = preprocessor.encode_dataset(dataset)
    n_num, cat_sizes = preprocessor.n_num, preprocessor.cat_sizes
    x_num0 = X[:, :n_num].astype(np.float64)
    codes0 = dataset.cat

    student = VDenoiser(
        teacher.net.copy(), teacher.n_num, teacher.cat_sizes, teacher.t_dim,
        teacher.alpha_bar.copy(), teacher.t_values.copy(),
        lineage=teacher.lineage + (("convert_to_v", seed),),
    )
    state = nn.adam_init(nn.net_params(student.net), lr=cfg.lr)
    slices = student.head_slices()
    n_cat = max(len(cat_sizes), 1)
    for epoch in range(cfg.epochs):
        for idx in nn.iterate_minibatches(len(X), cfg.batch_size, rng):
            b = len(idx)
            t = rng.integers(1, teacher.steps + 1, size=b)
            eps = rng.standard_normal((b, n_num))
            u = rng.random((b, len(cat_sizes)))
            ab = teacher.alpha_bar[t]
            z, codes_t = diffuse_rows(x_num0[idx], codes0[idx], ab, cat_sizes, eps, u)
            c = np.sqrt(ab)[:, None]
            s = np.sqrt(1.0 - ab)[:, None]
            x_enc = np.concatenate([z.astype(np.float32), onehot(codes_t, cat_sizes)], axis=1)
            eps_teacher = teacher.predict(x_enc, t)[0].astype(np.float64)
            v_target = np.clip((eps_teacher - s * z) / c, -cfg.v_clip, cfg.v_clip)

            probs_target = []
            for j in range(len(cat_sizes)):
                target = np.zeros((b, cat_sizes[j]))
                target[np.arange(b), codes0[idx, j]] = 1.0
                probs_target.append(target)
            inp = student.net_input(x_enc, t)
            out = nn.forward(student.net, inp)
            loss, upstream = _head_upstream(out, n_num, slices, v_target, probs_target, b, n_cat)
            if not np.isfinite(loss):
                raise nn.TrainingDiverged(f"conversion loss non-finite at epoch {epoch}")
            grads, _ = nn.backward(student.net, inp, upstream)
            nn.adam_step(state, nn.net_params(student.net), grads)

    consistency = _eps_consistency(teacher, student, x_num0, codes0, cat_sizes, seed + 1)
    log.info("convert_to_v: held-out implied-eps MSE vs teacher = %.5f", consistency)
    if cfg.consistency_bound is not None and consistency > cfg.consistency_bound:
        raise ValueError(
            f"conversion consistency {consistency:.5f} exceeds bound {cfg.consistency_bound}"
        )
    return student


def _eps_consistency(teacher, student, x_num0, codes0, cat_sizes, seed, n=2048):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(x_num0), size=min(n, len(x_num0)))
    t = rng.integers(1, teacher.steps + 1, size=len(idx))
    eps = rng.standard_normal((len(idx), x_num0.shape[1]))
    u = rng.random((len(idx), len(cat_sizes)))
    ab = teacher.alpha_bar[t]
    z, codes_t = diffuse_rows(x_num0[idx], codes0[idx], ab, cat_sizes, eps, u)
    x_enc = np.concatenate([z.astype(np.float32), onehot(codes_t, cat_sizes)], axis=1)
    eps_teacher = teacher.predict(x_enc, t)[0].astype(np.float64)
    v_hat = student.predict(x_enc, t)[0].astype(np.float64)
    _, eps_implied = x_eps_from_v(z, v_hat, np.arctan2(np.sqrt(1 - ab), np.sqrt(ab))[:, None])
    return float(np.mean((eps_implied - eps_teacher) ** 2, dtype=np.float64))


def ddim_rollout(model: TabularDenoiser, z, codes, t_idx, steps: int, clip: float):
    """Run `steps` deterministic v-steps from per-row grid indices t_idx,
    holding the categorical context fixed; returns (z_final, logits at the
    deepest evaluation)."""
    z = np.asarray(z, dtype=np.float64)
    t_idx = np.asarray(t_idx, dtype=np.int64)
    last_logits = None
    for step in range(steps):
        a = t_idx - step
        b = a - 1
        ab_a = model.alpha_bar[a][:, None]
        ab_b = model.alpha_bar[b][:, None]
        c_a, s_a = np.sqrt(ab_a), np.sqrt(1.0 - ab_a)
        c_b, s_b = np.sqrt(ab_b), np.sqrt(1.0 - ab_b)
        x_enc = np.concatenate([z.astype(np.float32), onehot(codes, model.cat_sizes)], axis=1)
        head, logits = model.predict(x_enc, a)
        head = head.astype(np.float64)
        if model.predicts == "v":
            x0 = c_a * z - s_a * head
        else:
            x0 = (z - s_a * head) / c_a
        x0 = np.clip(x0, -clip, clip)
        eps = (z - c_a * x0) / s_a
        z = c_b * x0 + s_b * eps
        last_logits = logits
    return z, last_logits


def distill_stage(teacher: VDenoiser, dataset, preprocessor, factor: int, cfg: DistillConfig, seed: int) -> VDenoiser:
    """One distillation stage: the student's single step from level t on the
    coarse grid regresses to the teacher's `factor` deterministic steps; the
    teacher stays frozen."""
    if teacher.predicts != "v":
        raise ValueError("distill_stage expects a v-parameterized teacher")
    if teacher.steps % factor:
        raise ValueError(f"factor {factor} does not divide {teacher.steps} steps")
    rng = np.random.default_rng(seed)
    X = preprocessor.encode_dataset(dataset)
    n_num, cat_sizes = preprocessor.n_num, preprocessor.cat_sizes
    x_num0 = X[:, :n_num].astype(np.float64)
    codes0 = dataset.cat
    M = teacher.steps // factor

    student = VDenoiser(
        teacher.net.copy(), teacher.n_num, teacher.cat_sizes, teacher.t_dim,
        teacher.alpha_bar[::factor].copy(), teacher.t_values[::factor].copy(),
        lineage=teacher.lineage + (("distill", factor, seed),),
    )
    state = nn.adam_init(nn.net_params(student.net), lr=cfg.lr)
    slices = student.head_slices()
    n_cat = max(len(cat_sizes), 1)
    for epoch in range(cfg.epochs):
        for idx in nn.iterate_minibatches(len(X), cfg.batch_size, rng):
            b = len(idx)
            j = rng.integers(1, M + 1, size=b)          # student grid index
            t = j * factor                               # teacher grid index
            eps = rng.standard_normal((b, n_num))
            u = rng.random((b, len(cat_sizes)))
            ab_t = teacher.alpha_bar[t]
            z_t, codes_t = diffuse_rows(x_num0[idx], codes0[idx], ab_t, cat_sizes, eps, u)
            z_end, teach_logits = ddim_rollout(teacher, z_t, codes_t, t, factor, cfg.clip)

            ab_b = teacher.alpha_bar[t - factor]
            c_a, s_a = np.sqrt(ab_t)[:, None], np.sqrt(1.0 - ab_t)[:, None]
            c_b, s_b = np.sqrt(ab_b)[:, None], np.sqrt(1.0 - ab_b)[:, None]
            denom = c_b - (s_b / s_a) * c_a
            denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
            x_tilde = (z_end - (s_b / s_a) * z_t) / denom
            eps_tilde = (z_t - c_a * x_tilde) / s_a
            v_target = c_a * eps_tilde - s_a * x_tilde
            probs_target = [nn.softmax(l.astype(np.float64)) for l in teach_logits]

            x_enc = np.concatenate([z_t.astype(np.float32), onehot(codes_t, cat_sizes)], axis=1)
            inp = student.net_input(x_enc, j)
            out = nn.forward(student.net, inp)
            loss, upstream = _head_upstream(
                out, n_num, slices, v_target, probs_target, b, n_cat
            )
            if not np.isfinite(loss):
                raise nn.TrainingDiverged(f"distillation loss non-finite at epoch {epoch}")
            grads, _ = nn.backward(student.net, inp, upstream)
            nn.adam_step(state, nn.net_params(student.net), grads)
    return student


def run_progressive_distillation(
    teacher: VDenoiser, plan: DistillationPlan, dataset, preprocessor, cfg: DistillConfig, seed: int
) -> VDenoiser:
    """Chain the plan's stages; the result samples on the reduced grid and
    drops into guided generation unchanged."""
    plan.final_steps(teacher.steps)  # validate composition up front
    model = teacher
    for i, factor in enumerate(plan.factors):
        model = distill_stage(model, dataset, preprocessor, int(factor), cfg, seed + i)
        log.info("distillation stage x%d done: %d steps", factor, model.steps)
    return model
