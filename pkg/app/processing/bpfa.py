"""
Patch dictionary learning with a beta-process factor model, fitted by
stochastic EM on the observed pixels of one slice.

Every B x B patch y_i (stride 1) is modelled as

    y_i = D alpha_i + noise,  alpha_i = z_i * w_i,
    d_k ~ N(0, B^-2 I),  w_ik ~ N(0, 1/gamma_w),  z_ik ~ Bernoulli(pi_k),
    pi_k ~ Beta(a/K, b(K-1)/K),  noise ~ N(0, 1/gamma_n)

and only the pixels inside the mask enter the likelihood.

E-step: coordinate passes over the atoms decide z. For patch i and atom k,
with r the masked residual excluding atom k, E = |d_k|^2 on observed pixels and
v_k the mean square of atom k's active weights (1/gamma_w before it has any),

    z_ik = [min(logit(pi_k), 0) - log(1 + gamma_n E v_k) / 2
            + v_k (gamma_n * r.d_k)^2 / (2 (1 + gamma_n E v_k)) > 0]

which is the Bayes factor of the observed pixels with the weight prior taken at
the scale the atom is actually used at, so the test does not depend on the
arbitrary norm the maximum-likelihood update leaves D at. The prior odds can
only argue against an atom: with b = 0 the usage prior sits at 1 - 1e-6.
w_i is then the joint posterior mean over the active atoms,

    w_S = (D_S W D_S^T + (gamma_w / gamma_n) I)^-1 D_S W y_i.

M-step: joint masked least squares for D at every patch position (maximum
likelihood, blended with the old atoms by eta), Beta-smoothed usage frequencies
for pi, and the inverse mean squared residual for gamma_n unless it is held
fixed. gamma_w stays at its configured value.

Patches are rows of an (n_p, B*B) matrix in row-major anchor order.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from sklearn.feature_extraction.image import extract_patches_2d, reconstruct_from_patches_2d

from app.processing.core import RngSeed, make_rng
from app.processing.models import BpfaConfig, MeasurementSlice

logger = logging.getLogger(__name__)

EPS_PI = 1e-6
EPS_BETA = 1e-6
GAMMA_N_MIN = 1e-3
GAMMA_N_MAX = 1e9
RSS_FLOOR = 1e-12
RIDGE_SCALE = 1e-12
RSS_CHUNK = 65536
SOLVE_CHUNK = 1024


class NumericalFailureError(ArithmeticError):
    """The learner's state stopped being finite."""


class PatchSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    b: int = Field(ge=1)
    shape: Tuple[int, int]
    patches: np.ndarray
    masks: np.ndarray
    anchors: np.ndarray

    @model_validator(mode="after")
    def _check_shapes(self):
        p = self.b * self.b
        if self.patches.ndim != 2 or self.patches.shape[1] != p:
            raise ValueError(f"Patches must be (n_p, {p}), got {self.patches.shape}")
        if self.masks.shape != self.patches.shape:
            raise ValueError(f"Masks {self.masks.shape} do not match patches {self.patches.shape}")
        if self.anchors.shape != (self.patches.shape[0], 2):
            raise ValueError(f"Anchors must be (n_p, 2), got {self.anchors.shape}")
        return self

    @property
    def n_p(self) -> int:
        return int(self.patches.shape[0])


class Dictionary(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    atoms: np.ndarray

    @model_validator(mode="after")
    def _check_atoms(self):
        if self.atoms.ndim != 2:
            raise ValueError(f"Atoms must be a (K, B*B) matrix, got shape {self.atoms.shape}")
        if not np.all(np.isfinite(self.atoms)):
            raise ValueError("Dictionary atoms must be finite")
        return self

    @property
    def k(self) -> int:
        return int(self.atoms.shape[0])


class BpfaState(BaseModel):
    """Learner state for one slice. Arrays are updated in place by the EM steps."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    dictionary: Dictionary
    z: np.ndarray
    w: np.ndarray
    pi: np.ndarray
    gamma_n: float = Field(gt=0.0)
    gamma_w: float = Field(gt=0.0)
    a: float = Field(gt=0.0)
    b_param: float = Field(ge=0.0)
    rss_history: List[float] = Field(default_factory=list)
    n_batches: int = 0

    @model_validator(mode="after")
    def _check_state(self):
        k = self.dictionary.k
        if self.z.shape != self.w.shape or self.z.ndim != 2 or self.z.shape[1] != k:
            raise ValueError(f"z {self.z.shape} and w {self.w.shape} must both be (n_p, {k})")
        if self.pi.shape != (k,) or np.any(self.pi < 0) or np.any(self.pi > 1):
            raise ValueError("pi must hold K probabilities in [0, 1]")
        return self

    @property
    def alpha(self) -> np.ndarray:
        return np.where(self.z, self.w, 0.0)


def extract_patches(measurement: MeasurementSlice, n1: int, n2: int, b: int) -> PatchSet:
    """Dense stride-1 B x B patches with their observation masks, anchors in row-major order."""
    if b < 1 or b > min(n1, n2):
        raise ValueError(f"Patch size {b} does not fit a {n1}x{n2} slice")
    if measurement.shape != (n1, n2):
        raise ValueError(f"Measurement shape {measurement.shape} differs from {(n1, n2)}")

    values = extract_patches_2d(np.asarray(measurement.values, dtype=np.float64), (b, b))
    observed = extract_patches_2d(measurement.observed.astype(np.float64), (b, b))
    rows, cols = np.meshgrid(np.arange(n1 - b + 1), np.arange(n2 - b + 1), indexing="ij")
    return PatchSet(
        b=b,
        shape=(n1, n2),
        patches=values.reshape(values.shape[0], b * b),
        masks=observed.reshape(observed.shape[0], b * b).astype(bool),
        anchors=np.stack([rows.ravel(), cols.ravel()], axis=1),
    )


def _prior_pi(config: BpfaConfig) -> float:
    a_k = config.a / config.k
    b_k = max(config.b_param, EPS_BETA) * (config.k - 1) / config.k
    return float(np.clip(a_k / (a_k + b_k), EPS_PI, 1.0 - EPS_PI))


def init_state(
    config: BpfaConfig,
    n_p: int,
    rng: RngSeed,
    initial_dictionary: Optional[np.ndarray] = None,
) -> BpfaState:
    """Draw atoms, weights and indicators from the priors; pi starts at the Beta mean."""
    generator = make_rng(rng)
    p = config.b * config.b
    atoms = generator.normal(0.0, 1.0 / config.b, size=(config.k, p))
    w = generator.normal(0.0, 1.0 / np.sqrt(config.gamma_w_init), size=(n_p, config.k))
    pi = np.full(config.k, _prior_pi(config))
    z = generator.random(size=(n_p, config.k)) < pi

    if initial_dictionary is not None:
        initial = np.array(initial_dictionary, dtype=np.float64)
        if initial.shape != (config.k, p):
            raise ValueError(f"Initial dictionary must be ({config.k}, {p}), got {initial.shape}")
        atoms = initial
        # prior atoms have unit expected norm; weights follow a supplied atom's norm inversely
        norms = np.linalg.norm(atoms, axis=1)
        w = w / np.where(norms > 0, norms, 1.0)

    return BpfaState(
        dictionary=Dictionary(atoms=atoms),
        z=z,
        w=np.where(z, w, 0.0),
        pi=pi,
        gamma_n=config.gamma_n_init,
        gamma_w=config.gamma_w_init,
        a=config.a,
        b_param=config.b_param,
    )


def _update_coefficients(
    y: np.ndarray,
    observed: np.ndarray,
    z: np.ndarray,
    w: np.ndarray,
    atoms: np.ndarray,
    pi: np.ndarray,
    gamma_n: float,
    gamma_w: float,
    prior_var: np.ndarray,
    n_sweeps: int,
) -> Tuple[np.ndarray, np.ndarray]:
    weight = observed.astype(np.float64)
    has_data = observed.any(axis=1)
    alpha = np.where(z, w, 0.0)
    residual = weight * (y - alpha @ atoms)
    prior_logit = np.minimum(np.log(pi) - np.log1p(-pi), 0.0)

    for _ in range(n_sweeps):
        for k in range(atoms.shape[0]):
            d = atoms[k]
            residual += weight * np.outer(alpha[:, k], d)
            energy = weight @ (d * d)
            corr = residual @ d
            lam = gamma_w + gamma_n * energy
            spread = gamma_n * energy * prior_var[k]
            log_odds = prior_logit[k] - 0.5 * np.log1p(spread) + 0.5 * prior_var[k] * (gamma_n * corr) ** 2 / (1.0 + spread)
            on = (log_odds > 0) & has_data
            w_k = np.where(on, gamma_n * corr / lam, 0.0)
            residual -= weight * np.outer(w_k, d)
            z[:, k] = on
            w[:, k] = w_k
            alpha[:, k] = w_k
    return z, _posterior_means(y, weight, z, atoms, gamma_n, gamma_w)


def _posterior_means(
    y: np.ndarray,
    weight: np.ndarray,
    z: np.ndarray,
    atoms: np.ndarray,
    gamma_n: float,
    gamma_w: float,
) -> np.ndarray:
    """Joint posterior mean of each patch's weights over its active atoms; inactive weights are 0."""
    n, k = z.shape
    w = np.zeros((n, k))
    ridge = gamma_w / gamma_n
    eye = np.eye(k)
    for start in range(0, n, SOLVE_CHUNK):
        rows = np.arange(start, min(start + SOLVE_CHUNK, n))
        rows = rows[z[rows].any(axis=1)]
        if rows.size == 0:
            continue
        on = z[rows].astype(np.float64)
        gram = (weight[rows][:, None, :] * atoms[None, :, :]) @ atoms.T
        # off atoms decouple: their row reduces to ridge * w_k = 0
        gram *= on[:, :, None] * on[:, None, :]
        gram += ridge * eye
        rhs = on * ((weight[rows] * y[rows]) @ atoms.T)
        try:
            w[rows] = np.linalg.solve(gram, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as e:
            raise NumericalFailureError(f"Weight posterior is singular: {e}") from e
    return w


def weight_scale(state: BpfaState) -> np.ndarray:
    """Mean square of each atom's active weights over all patches; 1/gamma_w for an atom with none."""
    used = state.z.sum(axis=0)
    power = np.where(state.z, state.w * state.w, 0.0).sum(axis=0)
    scale = np.divide(power, used, out=np.zeros(used.shape), where=used > 0)
    return np.where(scale > 0, scale, 1.0 / state.gamma_w)


def e_step(
    state: BpfaState,
    batch: np.ndarray,
    patchset: PatchSet,
    n_sweeps: int = 1,
    workers: int = 1,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Update z and w of the batch's patches against a snapshot of D, pi and gamma.

    Patches are independent given the snapshot, so the batch may be split
    across worker threads. Patches with no observed pixel get alpha = 0.
    """
    batch = np.asarray(batch, dtype=np.int64)
    atoms = state.dictionary.atoms
    args = (atoms, state.pi, state.gamma_n, state.gamma_w, weight_scale(state), n_sweeps)

    def run(rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _update_coefficients(
            patchset.patches[rows], patchset.masks[rows], state.z[rows].copy(), state.w[rows].copy(), *args
        )

    if workers <= 1 or batch.size < 2 * workers:
        z_new, w_new = run(batch)
    else:
        chunks = [c for c in np.array_split(batch, workers) if c.size]
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(run, chunks))
        z_new = np.concatenate([p[0] for p in parts])
        w_new = np.concatenate([p[1] for p in parts])

    state.z[batch] = z_new
    state.w[batch] = w_new
    return z_new, w_new


def _fit_atoms(y: np.ndarray, weight: np.ndarray, alpha: np.ndarray, old: np.ndarray, eta: float) -> np.ndarray:
    """
    Masked least squares for all atoms at once, one K x K system per patch
    position. An (atom, position) pair that no used coefficient observes keeps
    its old value.
    """
    k_atoms, p = old.shape
    gram = np.zeros((p, k_atoms * k_atoms))
    for start in range(0, alpha.shape[0], SOLVE_CHUNK):
        a = alpha[start:start + SOLVE_CHUNK]
        gram += weight[start:start + SOLVE_CHUNK].T @ (a[:, :, None] * a[:, None, :]).reshape(a.shape[0], -1)
    gram = gram.reshape(p, k_atoms, k_atoms)
    rhs = (weight * y).T @ alpha

    diag = np.diagonal(gram, axis1=1, axis2=2)
    seen = diag > 0
    if not seen.any():
        return old.copy()

    # unseen rows and columns are exactly zero; a unit pivot keeps the system solvable
    scale = np.where(seen, diag, 0.0).sum(axis=1) / np.maximum(seen.sum(axis=1), 1)
    pivots = np.where(seen, RIDGE_SCALE * scale[:, None], 1.0)
    system = gram + pivots[:, :, None] * np.eye(k_atoms)[None, :, :]
    try:
        fitted = np.linalg.solve(system, rhs[..., None])[..., 0].T
    except np.linalg.LinAlgError as e:
        raise NumericalFailureError(f"Dictionary normal equations are singular: {e}") from e
    return np.where(seen.T, eta * fitted + (1.0 - eta) * old, old)


def m_step(
    state: BpfaState,
    batch: np.ndarray,
    patchset: PatchSet,
    eta: float,
    learn_gamma_n: bool = True,
) -> BpfaState:
    """Refit atoms, pi and (unless held) gamma_n on the batch; blend each with its old value by eta."""
    batch = np.asarray(batch, dtype=np.int64)
    y = patchset.patches[batch]
    weight = patchset.masks[batch].astype(np.float64)
    alpha = state.alpha[batch]
    if not np.all(np.isfinite(alpha)):
        raise NumericalFailureError("Patch coefficients are not finite")

    atoms = _fit_atoms(y, weight, alpha, state.dictionary.atoms, eta)
    residual = weight * (y - alpha @ atoms)

    n_obs = float(weight.sum())
    if learn_gamma_n and n_obs > 0:
        rss = float(np.sum(residual * residual))
        target = float(np.clip(n_obs / max(rss, RSS_FLOOR), GAMMA_N_MIN, GAMMA_N_MAX))
        if target in (GAMMA_N_MIN, GAMMA_N_MAX):
            logger.debug(f"Noise precision estimate clamped to {target:g}")
        state.gamma_n = float(np.clip(eta * target + (1.0 - eta) * state.gamma_n, GAMMA_N_MIN, GAMMA_N_MAX))

    has_data = weight.any(axis=1)
    n_seen = int(has_data.sum())
    if n_seen:
        k_atoms = atoms.shape[0]
        a_k = state.a / k_atoms
        b_k = max(state.b_param, EPS_BETA) * (k_atoms - 1) / k_atoms
        counts = state.z[batch][has_data].sum(axis=0)
        target_pi = (a_k + counts) / (a_k + b_k + n_seen)
        state.pi = np.clip(eta * target_pi + (1.0 - eta) * state.pi, EPS_PI, 1.0 - EPS_PI)

    if not np.all(np.isfinite(atoms)) or not np.isfinite(state.gamma_n) or not np.all(np.isfinite(state.pi)):
        raise NumericalFailureError("Dictionary update produced non-finite values")
    state.dictionary = Dictionary(atoms=atoms)
    return state


def masked_rss(state: BpfaState, patchset: PatchSet) -> float:
    """Sum over patches of the squared residual on observed pixels."""
    atoms = state.dictionary.atoms
    total = 0.0
    for start in range(0, patchset.n_p, RSS_CHUNK):
        rows = slice(start, start + RSS_CHUNK)
        alpha = np.where(state.z[rows], state.w[rows], 0.0)
        diff = patchset.masks[rows] * (patchset.patches[rows] - alpha @ atoms)
        total += float(np.sum(diff * diff))
    return total


def infer(
    measurement: MeasurementSlice,
    n1: int,
    n2: int,
    config: BpfaConfig,
    rng: RngSeed,
    patchset: Optional[PatchSet] = None,
    initial_dictionary: Optional[np.ndarray] = None,
) -> BpfaState:
    """
    Stochastic EM: n_epoch passes, each shuffling the patches and walking them
    in contiguous mini-batches of at most n_batch, E-step then M-step per batch.
    """
    generator = make_rng(rng)
    if patchset is None:
        patchset = extract_patches(measurement, n1, n2, config.b)
    state = init_state(config, patchset.n_p, generator, initial_dictionary=initial_dictionary)

    for epoch in range(config.n_epoch):
        order = generator.permutation(patchset.n_p)
        for start in range(0, patchset.n_p, config.n_batch):
            batch = order[start:start + config.n_batch]
            e_step(state, batch, patchset, n_sweeps=config.n_sweeps, workers=config.workers)
            m_step(state, batch, patchset, config.eta, learn_gamma_n=config.learn_gamma_n)
            state.n_batches += 1
        rss = masked_rss(state, patchset)
        if not np.isfinite(rss):
            raise NumericalFailureError(f"Masked residual became non-finite in epoch {epoch + 1}")
        state.rss_history.append(rss)
        logger.info(
            f"BPFA epoch {epoch + 1}/{config.n_epoch}: masked RSS {rss:.6g}, "
            f"gamma_n {state.gamma_n:.4g}, mean active atoms {state.z.sum(axis=1).mean():.2f}"
        )
    return state


def reconstruct_slice(state: BpfaState, patchset: PatchSet, n1: int, n2: int) -> np.ndarray:
    """Average D alpha_i over every patch covering a pixel, clamped to [0, 1]."""
    estimates = (state.alpha @ state.dictionary.atoms).reshape(patchset.n_p, patchset.b, patchset.b)
    image = reconstruct_from_patches_2d(estimates, (n1, n2))
    return np.clip(image, 0.0, 1.0)
