"""Fixed-effects panel estimators with double-clustered covariance."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats

from wildfire_rnd.core.enums import BinMode, OptionRight, TreatmentFlag
from wildfire_rnd.core.errors import DataError, NumericError, ParameterError
from wildfire_rnd.core.models import DensityCurve, PanelObs, TreatmentCalendar
from wildfire_rnd.engine.surface_repair import join_treatment

logger = logging.getLogger(__name__)

AbsorbSpec = Sequence[Union[str, Tuple[str, ...]]]

DEMEAN_TOL = 1e-12
DEMEAN_MAX_ITER = 10_000
COLLINEAR_TOL = 1e-9
MIN_EFFECTIVE = 30
FWL_MIN_EFFECTIVE = 30
Z_95 = float(stats.norm.ppf(0.975))

SMILE_COVARIATES = ['moneyness', 'sqrt_maturity', 'moneyness_x_sqrt_maturity']
TREATED_COVARIATES = ['treated', 'treated_x_moneyness', 'treated_x_sqrt_maturity',
                      'treated_x_moneyness_x_sqrt_maturity']
FE_COLUMNS = {'none': (), 'firm': ('firm',), 'date': ('date',), 'both': ('firm', 'date')}
GAP_BUCKETS = [(0.0, 30.0), (30.0, 90.0), (90.0, 180.0), (180.0, np.inf)]


# ===== RESULT TYPES =====

@dataclass
class FEResult:
    coefs: pd.Series
    vcov: pd.DataFrame
    n: int
    n_firms: int
    n_dates: int
    r2_within: float
    dropped: List[str] = field(default_factory=list)
    eigen_floored: bool = False
    absorb: List[str] = field(default_factory=list)
    resid: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def se(self) -> pd.Series:
        return pd.Series(np.sqrt(np.maximum(np.diag(self.vcov.to_numpy()), 0.0)), index=self.coefs.index)

    @property
    def t_stats(self) -> pd.Series:
        return self.coefs / self.se

    def conf_int(self, z: float = Z_95) -> pd.DataFrame:
        return pd.DataFrame({'low': self.coefs - z * self.se, 'high': self.coefs + z * self.se})

    def to_dict(self):
        return {
            'coefs': self.coefs.to_dict(),
            'se': self.se.to_dict(),
            'vcov': self.vcov.to_numpy().tolist(),
            'n': self.n,
            'n_firms': self.n_firms,
            'n_dates': self.n_dates,
            'r2_within': self.r2_within,
            'dropped': self.dropped,
            'eigen_floored': self.eigen_floored,
            'absorb': self.absorb,
        }


@dataclass
class TEProfile:
    points: np.ndarray
    delta: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    flagged: np.ndarray
    method: str = "binned"

    def __post_init__(self):
        arrays = [np.asarray(a) for a in (self.points, self.delta, self.ci_low, self.ci_high, self.flagged)]
        if len({a.shape for a in arrays}) != 1:
            raise ParameterError("treatment-effect profile columns must be aligned")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'point': self.points, 'delta': self.delta,
                             'ci_low': self.ci_low, 'ci_high': self.ci_high,
                             'flagged': np.asarray(self.flagged, dtype=int)})


@dataclass
class SmileTable:
    """One smile regression per fixed-effect column (none, firm, date, both); right None pools calls and puts"""
    right: Optional[OptionRight]
    flag: TreatmentFlag
    columns: Dict[str, FEResult]

    def to_frame(self) -> pd.DataFrame:
        rows = {}
        for name, result in self.columns.items():
            rows[(name, 'coef')] = result.coefs
            rows[(name, 'se')] = result.se
        return pd.DataFrame(rows)

    def to_dict(self):
        return {'right': self.right.value if self.right is not None else None, 'flag': self.flag.value,
                'columns': {name: r.to_dict() for name, r in self.columns.items()}}


@dataclass
class FwlSurface:
    moneyness: np.ndarray
    maturity: np.ndarray
    control: np.ndarray
    treated: np.ndarray
    sparse: np.ndarray
    mode: str = "local"
    linear_coefs: Optional[pd.Series] = None

    @property
    def delta(self) -> np.ndarray:
        return self.treated - self.control


# ===== ABSORPTION =====

def panel_frame(obs: Sequence[PanelObs]) -> pd.DataFrame:
    """Long DataFrame with firm, date, y, weight and one column per covariate"""
    rows = [{'firm': o.firm, 'date': o.date, 'y': o.y, 'weight': o.weight, **o.covariates} for o in obs]
    return pd.DataFrame(rows)


def _group_codes(frame: pd.DataFrame, spec: Union[str, Tuple[str, ...]]) -> np.ndarray:
    if isinstance(spec, str):
        return pd.factorize(frame[spec], sort=True)[0]
    return frame.groupby(list(spec), sort=True).ngroup().to_numpy()


def _spec_name(spec) -> str:
    return spec if isinstance(spec, str) else "x".join(spec)


def absorb(values: np.ndarray, groups: Sequence[np.ndarray], weights: np.ndarray,
           tol: float = DEMEAN_TOL, max_iter: int = DEMEAN_MAX_ITER) -> np.ndarray:
    """Weighted alternating within-demeaning over each grouping until group means vanish"""
    x = np.array(values, dtype=float, copy=True)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if not groups:
        return x[:, 0] if squeeze else x
    scale = max(1.0, float(np.max(np.abs(x)))) if x.size else 1.0
    totals = [np.bincount(codes, weights=weights) for codes in groups]
    for sweep in range(max_iter):
        worst = 0.0
        for codes, total in zip(groups, totals):
            safe = np.where(total > 0, total, 1.0)
            means = np.column_stack([np.bincount(codes, weights=weights * x[:, j], minlength=total.size) / safe
                                     for j in range(x.shape[1])])
            x -= means[codes]
            worst = max(worst, float(np.max(np.abs(means))) if means.size else 0.0)
        if len(groups) == 1 or worst <= tol * scale:
            break
    else:
        logger.warning(f"[PANEL] demeaning stopped after {max_iter} sweeps, residual mean {worst:.2e}")
    return x[:, 0] if squeeze else x


def _independent_columns(demeaned: np.ndarray, raw: np.ndarray, root_w: np.ndarray,
                         names: Sequence[str]) -> Tuple[List[int], List[str]]:
    keep, dropped = [], []
    for j, name in enumerate(names):
        col = root_w * demeaned[:, j]
        size = float(np.linalg.norm(root_w * raw[:, j]))
        if keep:
            basis = root_w[:, None] * demeaned[:, keep]
            col = col - basis @ np.linalg.lstsq(basis, col, rcond=None)[0]
        if size == 0.0 or np.linalg.norm(col) <= COLLINEAR_TOL * size:
            dropped.append(name)
        else:
            keep.append(j)
    return keep, dropped


def dcluster_cov(design: np.ndarray, resid: np.ndarray, weights: np.ndarray,
                 clusters: Sequence[np.ndarray]):
    """Cluster-robust sandwich, double-clustered when two cluster codes are given.

    V = V_a + V_b - V_ab with each term scaled by C/(C-1) * (N-1)/(N-K).
    No cluster codes gives the heteroskedasticity-robust N/(N-K) sandwich.
    Returns (vcov, eigen_floored).
    """
    n, k = design.shape
    weighted = design * weights[:, None]
    bread = np.linalg.inv(design.T @ weighted)
    scores = weighted * resid[:, None]

    def one_way(codes):
        codes = pd.factorize(codes)[0] if codes.dtype.kind not in "iu" else codes
        n_clusters = int(np.unique(codes).size)
        if n_clusters < 2:
            raise ParameterError("clustering needs at least 2 clusters in every dimension")
        sums = np.zeros((int(codes.max()) + 1, k))
        np.add.at(sums, codes, scores)
        scale = n_clusters / (n_clusters - 1.0) * (n - 1.0) / (n - k)
        return scale * bread @ (sums.T @ sums) @ bread

    if not clusters:
        vcov = one_way(np.arange(n))
    elif len(clusters) == 1:
        vcov = one_way(np.asarray(clusters[0]))
    elif len(clusters) == 2:
        a, b = (np.asarray(c) for c in clusters)
        both = pd.DataFrame({"a": a, "b": b}).groupby(["a", "b"], sort=True).ngroup().to_numpy()
        vcov = one_way(a) + one_way(b) - one_way(both)
    else:
        raise ParameterError("at most two cluster dimensions are supported")
    vcov = 0.5 * (vcov + vcov.T)
    eigval, eigvec = np.linalg.eigh(vcov)
    floored = bool(eigval.min() < -1e-12 * max(abs(eigval).max(), 1e-300))
    if floored:
        logger.warning(f"[PANEL] double-clustered covariance not PSD (min eigenvalue {eigval.min():.2e}), floored at 0")
        vcov = (eigvec * np.maximum(eigval, 0.0)) @ eigvec.T
    return vcov, floored


def twoway_fe_fit(frame: Union[pd.DataFrame, Sequence[PanelObs]], y: str, covariates: Sequence[str],
                  absorb_on: AbsorbSpec = ('firm', 'date'), weight: Optional[str] = None,
                  cluster: Sequence[str] = ('firm', 'date')) -> FEResult:
    """Weighted OLS after absorbing the listed fixed effects.

    Entries of ``absorb_on`` are column names or tuples of names for
    interacted effects such as ('firm', 'bin'). Without absorption an
    intercept 'const' is added. Collinear or fully absorbed regressors are
    dropped with a warning and listed in ``dropped``. A sequence of PanelObs
    is laid out with panel_frame first; its outcome column is 'y' and its
    weight column 'weight'.
    """
    if not isinstance(frame, pd.DataFrame):
        frame = panel_frame(frame)
    for col in ('firm', 'date'):
        if col not in frame:
            raise DataError(f"panel is missing the '{col}' column")
    order = [c for c in ('firm', 'date', 'moneyness') if c in frame]
    data = frame.sort_values(order, kind="mergesort").reset_index(drop=True)
    w = data[weight].to_numpy(float) if weight else np.ones(len(data))
    if np.any(w < 0):
        raise ParameterError("panel weights must be >= 0")
    data, w = data[w > 0].reset_index(drop=True), w[w > 0]
    n_firms, n_dates = int(data['firm'].nunique()), int(data['date'].nunique())
    if n_firms < 2 or n_dates < 2:
        raise ParameterError(f"need >= 2 firms and >= 2 dates, got {n_firms} and {n_dates}")

    names = list(covariates)
    raw = data[names].to_numpy(float) if names else np.empty((len(data), 0))
    if not absorb_on:
        names = ['const'] + names
        raw = np.column_stack([np.ones(len(data)), raw])
    outcome = data[y].to_numpy(float)
    if not (np.all(np.isfinite(outcome)) and np.all(np.isfinite(raw))):
        raise ParameterError("panel outcome and covariates must be finite")

    groups = [_group_codes(data, spec) for spec in absorb_on]
    demeaned = absorb(np.column_stack([outcome, raw]), groups, w)
    y_dm, x_dm = demeaned[:, 0], demeaned[:, 1:]
    root_w = np.sqrt(w)
    keep, dropped = _independent_columns(x_dm, raw, root_w, names)
    for name in dropped:
        logger.warning(f"[PANEL] regressor '{name}' is collinear with the fixed effects or earlier columns, dropped")
    if not keep:
        raise ParameterError(f"every regressor was absorbed: {', '.join(dropped)}")
    x_dm = x_dm[:, keep]
    kept = [names[j] for j in keep]
    beta = np.linalg.lstsq(root_w[:, None] * x_dm, root_w * y_dm, rcond=None)[0]
    resid = y_dm - x_dm @ beta
    if len(data) <= len(kept):
        raise ParameterError("panel has no residual degrees of freedom")
    codes = [_group_codes(data, c) for c in cluster]
    vcov, floored = dcluster_cov(x_dm, resid, w, codes)
    total = float(np.sum(w * y_dm ** 2))
    r2 = 1.0 - float(np.sum(w * resid ** 2)) / total if total > 0 else float("nan")
    return FEResult(coefs=pd.Series(beta, index=kept), vcov=pd.DataFrame(vcov, index=kept, columns=kept),
                    n=int(len(data)), n_firms=n_firms, n_dates=n_dates, r2_within=r2,
                    dropped=dropped, eigen_floored=floored,
                    absorb=[_spec_name(s) for s in absorb_on], resid=resid)


# ===== RND TREATMENT EFFECTS =====

def density_panel(curves: Sequence[DensityCurve], calendar: Optional[Sequence[TreatmentCalendar]] = None,
                  flag: TreatmentFlag = TreatmentFlag.TREATED_NOW,
                  moneyness_grid: Optional[np.ndarray] = None) -> pd.DataFrame:
    """Densities on common moneyness points, in moneyness units (f(K) * F)"""
    grid = np.linspace(0.1, 1.8, 100) if moneyness_grid is None else np.asarray(moneyness_grid, dtype=float)
    frames = []
    for curve in curves:
        m = curve.moneyness
        inside = (grid >= m[0]) & (grid <= m[-1])
        points = grid[inside]
        supported = np.interp(points, m, curve.supported.astype(float)) >= 1.0
        points = points[supported]
        frames.append(pd.DataFrame({
            'firm': curve.ticker, 'date': curve.quote_date, 'expiry': curve.expiry,
            'maturity': curve.maturity, 'moneyness': points,
            'density': np.interp(points, m, curve.values) * curve.forward,
        }))
    columns = ['firm', 'date', 'expiry', 'maturity', 'moneyness', 'density']
    panel = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns)
    panel = join_treatment(panel, calendar, firm_col='firm', date_col='date')
    panel['treated'] = panel[TreatmentFlag(flag).value]
    return panel


def assign_bins(moneyness: np.ndarray, n_bins: int, mode: BinMode = BinMode.QUANTILE,
                moneyness_range: Optional[Sequence[float]] = None) -> np.ndarray:
    """Quantile bins of equal count (stable rank) or equal-width bins"""
    m = np.asarray(moneyness, dtype=float)
    if n_bins < 2:
        raise ParameterError("n_bins must be >= 2")
    if BinMode(mode) is BinMode.QUANTILE:
        order = np.argsort(m, kind="stable")
        rank = np.empty(m.size, dtype=np.int64)
        rank[order] = np.arange(m.size)
        return rank * n_bins // max(m.size, 1)
    lo, hi = moneyness_range if moneyness_range is not None else (float(m.min()), float(m.max()))
    edges = np.linspace(lo, hi, n_bins + 1)
    return np.clip(np.searchsorted(edges, m, side="right") - 1, 0, n_bins - 1)


def _profile_from_fit(result: Optional[FEResult], names: Sequence[str]):
    delta = np.full(len(names), np.nan)
    se = np.full(len(names), np.nan)
    if result is not None:
        for i, name in enumerate(names):
            if name in result.coefs.index:
                delta[i] = result.coefs[name]
                se[i] = result.se[name]
    return delta, se


def rnd_te_binned(panel: pd.DataFrame, n_bins: int = 30, bin_mode: BinMode = BinMode.QUANTILE,
                  moneyness_range: Optional[Sequence[float]] = None) -> TEProfile:
    """Treated x bin coefficients with firm x bin and date effects absorbed"""
    data = panel.sort_values(['firm', 'date', 'moneyness'], kind="mergesort").reset_index(drop=True)
    if moneyness_range is not None:
        lo, hi = moneyness_range
        data = data[(data['moneyness'] >= lo) & (data['moneyness'] <= hi)].reset_index(drop=True)
    raw_bins = assign_bins(data['moneyness'].to_numpy(), n_bins, bin_mode, moneyness_range)
    present = np.unique(raw_bins)
    merged = np.zeros(present.size, dtype=bool)
    if present.size < n_bins:
        missing = sorted(set(range(n_bins)) - set(present.tolist()))
        logger.warning(f"[PANEL] empty moneyness bins {missing} merged with their neighbours")
        # a bin absorbs the empty bins directly below it; trailing empties go to the last bin
        for i, b in enumerate(present):
            below = present[i - 1] if i else -1
            merged[i] = b - below > 1 or (i == present.size - 1 and b < n_bins - 1)
    data['bin'] = np.searchsorted(present, raw_bins)
    names = []
    for b in range(present.size):
        name = f"treated_bin_{b}"
        data[name] = data['treated'].to_numpy(float) * (data['bin'].to_numpy() == b)
        names.append(name)
    result = twoway_fe_fit(data, 'density', names, absorb_on=[('firm', 'bin'), 'date'])
    delta, se = _profile_from_fit(result, names)
    points = data.groupby('bin', sort=True)['moneyness'].mean().to_numpy()
    flagged = merged | ~np.isfinite(delta)
    return TEProfile(points=points, delta=delta, ci_low=delta - Z_95 * se, ci_high=delta + Z_95 * se,
                     flagged=flagged, method=f"binned_{present.size}")


def rnd_te_kernel(panel: pd.DataFrame, eval_points: Sequence[float], bandwidth: float,
                  min_effective: int = MIN_EFFECTIVE) -> TEProfile:
    """Gaussian-kernel-weighted firm and date FE regression of density on treated at each point"""
    if not bandwidth > 0:
        raise ParameterError(f"bandwidth must be > 0, got {bandwidth}")
    points = np.asarray(eval_points, dtype=float)
    m = panel['moneyness'].to_numpy(float)
    delta = np.full(points.size, np.nan)
    se = np.full(points.size, np.nan)
    flagged = np.zeros(points.size, dtype=bool)
    for i, point in enumerate(points):
        w = np.exp(-0.5 * ((m - point) / bandwidth) ** 2)
        near = w > 1e-12
        total = w[near].sum()
        n_eff = total ** 2 / np.sum(w[near] ** 2) if total > 0 else 0.0
        flagged[i] = n_eff < min_effective
        sub = panel[near].assign(kernel_weight=w[near])
        try:
            result = twoway_fe_fit(sub, 'density', ['treated'], absorb_on=('firm', 'date'),
                                   weight='kernel_weight')
        except (ParameterError, np.linalg.LinAlgError) as exc:
            logger.debug(f"[PANEL] kernel TE at {point:.3f} failed: {exc}")
            flagged[i] = True
            continue
        (delta[i],), (se[i],) = _profile_from_fit(result, ['treated'])
    flagged |= ~np.isfinite(delta)
    if flagged.any():
        logger.warning(f"[PANEL] {int(flagged.sum())} kernel TE points flagged (effective n < {min_effective} or unidentified)")
    return TEProfile(points=points, delta=delta, ci_low=delta - Z_95 * se, ci_high=delta + Z_95 * se,
                     flagged=flagged, method=f"kernel_{bandwidth:g}")


# ===== IV PANELS =====

def _with_smile_columns(iv_panel: pd.DataFrame, flag: TreatmentFlag) -> pd.DataFrame:
    data = iv_panel.copy()
    m, s = data['moneyness'].to_numpy(float), data['sqrt_maturity'].to_numpy(float)
    treated = data[TreatmentFlag(flag).value].to_numpy(float)
    data['moneyness_x_sqrt_maturity'] = m * s
    data['treated'] = treated
    data['treated_x_moneyness'] = treated * m
    data['treated_x_sqrt_maturity'] = treated * s
    data['treated_x_moneyness_x_sqrt_maturity'] = treated * m * s
    return data


def _check_persistent_flags(iv_panel: pd.DataFrame):
    if {'after_first', 'after_last'} <= set(iv_panel.columns):
        bad = (iv_panel['after_last'] > 0) & (iv_panel['after_first'] == 0)
        if bad.any():
            raise DataError(f"{int(bad.sum())} rows flagged after_last without after_first")


def _select_right(iv_panel: pd.DataFrame, right: Optional[OptionRight]) -> pd.DataFrame:
    if right is None:
        return iv_panel
    return iv_panel[iv_panel['right'] == OptionRight(right).value].reset_index(drop=True)


def smile_regression(iv_panel: pd.DataFrame, right: Optional[OptionRight],
                     flag: TreatmentFlag = TreatmentFlag.TREATED_NOW) -> SmileTable:
    """Linear smile in K/F, sqrt(T) and their product with treated interactions, four FE columns"""
    right = OptionRight(right) if right is not None else None
    data = _with_smile_columns(_select_right(iv_panel, right), flag)
    covariates = SMILE_COVARIATES + TREATED_COVARIATES
    if not data['treated'].any():
        logger.warning(f"[PANEL] no treated observations; {', '.join(TREATED_COVARIATES)} dropped")
        covariates = list(SMILE_COVARIATES)
    columns = {name: twoway_fe_fit(data, 'iv', covariates, absorb_on=fe)
               for name, fe in FE_COLUMNS.items()}
    label = f"{right.name.lower()}s" if right is not None else "all rights"
    logger.info(f"[PANEL] smile regression ({label}, {TreatmentFlag(flag).value}): n={columns['both'].n}")
    return SmileTable(right=right, flag=TreatmentFlag(flag), columns=columns)


def permanent_effect_regression(iv_panel: pd.DataFrame, right: Optional[OptionRight],
                                flag: TreatmentFlag = TreatmentFlag.AFTER_FIRST) -> FEResult:
    """Smile regression with a persistent exposure flag, firm and date effects"""
    flag = TreatmentFlag(flag)
    if flag is TreatmentFlag.TREATED_NOW:
        raise ParameterError("permanent effects use after_first or after_last")
    _check_persistent_flags(iv_panel)
    data = _with_smile_columns(_select_right(iv_panel, right), flag)
    return twoway_fe_fit(data, 'iv', SMILE_COVARIATES + TREATED_COVARIATES, absorb_on=('firm', 'date'))


def skew_crossover_maturity(result: FEResult) -> float:
    """Maturity where the treated skew shift vanishes: (beta_tau / delta_tau)^2.

    Expressed in the maturity unit of the IV panel the result was fit on.
    """
    try:
        beta_tau = float(result.coefs['treated_x_moneyness'])
        delta_tau = float(result.coefs['treated_x_moneyness_x_sqrt_maturity'])
    except KeyError as exc:
        raise ParameterError(f"result has no {exc.args[0]} coefficient")
    if delta_tau == 0.0:
        raise NumericError("treated moneyness x sqrt(maturity) coefficient is zero")
    return (beta_tau / delta_tau) ** 2


# ===== FWL SURFACE =====

def _local_quadratic(m: np.ndarray, t: np.ndarray, y: np.ndarray, m0: float, t0: float,
                     h_m: float, h_t: float, min_effective: float):
    zm, zt = (m - m0) / h_m, (t - t0) / h_t
    w = np.exp(-0.5 * (zm ** 2 + zt ** 2))
    total = w.sum()
    if total <= 0 or total ** 2 / np.sum(w ** 2) < min_effective:
        return np.nan
    root_w = np.sqrt(w)
    design = root_w[:, None] * np.column_stack([np.ones_like(zm), zm, zt, zm ** 2, zm * zt, zt ** 2])
    sv = np.linalg.svd(design, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        return np.nan
    return float(np.linalg.lstsq(design, root_w * y, rcond=None)[0][0])


def fwl_surface(iv_panel: pd.DataFrame, moneyness_points: Sequence[float], maturity_points: Sequence[float],
                flag: TreatmentFlag = TreatmentFlag.TREATED_NOW,
                bandwidths: Sequence[float] = (0.05, 30.0), min_obs: int = 1000,
                mode: str = "local") -> FwlSurface:
    """IV surface g(K/F, T) for controls and g + dg for treated after absorbing firm and date.

    ``mode='global_linear'`` replaces the local quadratic fits with one
    linear regression of the demeaned IV on demeaned K/F, T, treated and
    treated interactions; its coefficients equal twoway_fe_fit's.
    """
    data = iv_panel.sort_values(['firm', 'date', 'moneyness'], kind="mergesort").reset_index(drop=True)
    treated = data[TreatmentFlag(flag).value].to_numpy(float)
    m, t = data['moneyness'].to_numpy(float), data['maturity'].to_numpy(float)
    groups = [_group_codes(data, 'firm'), _group_codes(data, 'date')]
    weights = np.ones(len(data))
    m_grid, t_grid = np.asarray(moneyness_points, dtype=float), np.asarray(maturity_points, dtype=float)

    if mode == "global_linear":
        names = ['moneyness', 'maturity', 'treated', 'treated_x_moneyness', 'treated_x_maturity']
        design = np.column_stack([m, t, treated, treated * m, treated * t])
        demeaned = absorb(np.column_stack([data['iv'].to_numpy(float), design]), groups, weights)
        beta = np.linalg.lstsq(demeaned[:, 1:], demeaned[:, 0], rcond=None)[0]
        coefs = pd.Series(beta, index=names)
        mm, tt = np.meshgrid(m_grid, t_grid, indexing="ij")
        control = coefs['moneyness'] * mm + coefs['maturity'] * tt
        shift = coefs['treated'] + coefs['treated_x_moneyness'] * mm + coefs['treated_x_maturity'] * tt
        return FwlSurface(moneyness=m_grid, maturity=t_grid, control=control, treated=control + shift,
                          sparse=np.zeros(control.shape, dtype=bool), mode=mode, linear_coefs=coefs)
    if mode != "local":
        raise ParameterError(f"unknown FWL mode {mode!r}")

    for label, mask in (("control", treated == 0), ("treated", treated != 0)):
        if mask.sum() < min_obs:
            raise ParameterError(f"FWL surface needs >= {min_obs} {label} observations, got {int(mask.sum())}")
    iv_dm = absorb(data['iv'].to_numpy(float), groups, weights)
    h_m, h_t = bandwidths
    surfaces = {}
    for label, mask in (("control", treated == 0), ("treated", treated != 0)):
        grid = np.full((m_grid.size, t_grid.size), np.nan)
        for i, m0 in enumerate(m_grid):
            for j, t0 in enumerate(t_grid):
                grid[i, j] = _local_quadratic(m[mask], t[mask], iv_dm[mask], m0, t0, h_m, h_t, FWL_MIN_EFFECTIVE)
        surfaces[label] = grid
    sparse = ~np.isfinite(surfaces['control']) | ~np.isfinite(surfaces['treated'])
    if sparse.any():
        logger.warning(f"[PANEL] {int(sparse.sum())} FWL grid cells too sparse for a local quadratic")
    return FwlSurface(moneyness=m_grid, maturity=t_grid, control=surfaces['control'],
                      treated=surfaces['treated'], sparse=sparse, mode=mode)


def iv_cross_section(surface: FwlSurface, maturity: float) -> pd.DataFrame:
    """Control, treated and difference curves at one maturity, interpolated along maturity"""
    t = surface.maturity
    if not t[0] <= maturity <= t[-1]:
        raise ParameterError(f"maturity {maturity} outside the surface grid [{t[0]}, {t[-1]}]")

    def cut(values):
        return np.array([np.interp(maturity, t, row) for row in values])

    control, treated = cut(surface.control), cut(surface.treated)
    return pd.DataFrame({'maturity': maturity, 'moneyness': surface.moneyness,
                         'control': control, 'treated': treated, 'delta': treated - control})


# ===== SUPPLEMENTARY REGRESSIONS =====

def gap_treatment_regression(gaps: pd.DataFrame, flag: TreatmentFlag = TreatmentFlag.TREATED_NOW,
                             buckets: Sequence[Tuple[float, float]] = GAP_BUCKETS) -> Dict[str, FEResult]:
    """Log arbitrage gap on treated with firm and date effects, per maturity bucket (days)"""
    data = gaps.rename(columns={'ticker': 'firm'})
    data = data[np.isfinite(data['log_abs_delta'])].copy()
    data['treated'] = data[TreatmentFlag(flag).value].astype(float)
    days = data['maturity'].to_numpy(float) * 365.0
    out = {}
    for lo, hi in buckets:
        label = f"{lo:g}-{hi:g}d"
        sub = data[(days >= lo) & (days < hi)]
        try:
            out[label] = twoway_fe_fit(sub, 'log_abs_delta', ['treated'])
        except ParameterError as exc:
            logger.warning(f"[PANEL] gap regression bucket {label} skipped: {exc}")
    return out


def support_regression(supports: pd.DataFrame, flag: TreatmentFlag = TreatmentFlag.TREATED_NOW,
                       outcomes: Sequence[str] = ('min_moneyness', 'max_moneyness', 'n_strikes')
                       ) -> Dict[str, FEResult]:
    """Traded strike support on treated with firm and date effects"""
    data = supports.rename(columns={'ticker': 'firm'}).copy()
    data['treated'] = data[TreatmentFlag(flag).value].astype(float)
    return {outcome: twoway_fe_fit(data, outcome, ['treated']) for outcome in outcomes}
