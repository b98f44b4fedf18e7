"""Hypothesis tests and regression for reader-study and model-comparison data.

All p-values come from the in-repo special functions (:mod:`ringseq.special`).
Ranks use mid-ranks for ties throughout.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import special

WILCOXON_EXACT_MAX = 20
HOSPITAL_RANKS = ("Community", "City", "Teaching")  # ordinal coding 1..3
TITLES = ("Resident", "Fellow", "Attending")
YEARS_BANDS = ("1-5", "6-10", "11-15", "16-20", ">20")
READER_COLUMNS = ("participant_id", "hospital_rank", "title", "years", "acc_image_only", "acc_with_history")


class StatsError(ValueError):
    pass


class ReaderCsvError(StatsError):
    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass
class TestResult:
    statistic: float
    p_value: float
    df: object = None
    method: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["df"], tuple):
            d["df"] = list(d["df"])
        return d


def _arr(xs) -> np.ndarray:
    return np.asarray(xs, dtype=np.float64).ravel()


def describe(xs) -> dict:
    x = _arr(xs)
    if x.size < 2:
        raise StatsError("standard deviation needs at least two values")
    return {"n": int(x.size), "mean": float(x.mean()), "std": float(x.std(ddof=1)),
            "min": float(x.min()), "max": float(x.max())}


def rankdata(xs) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = _arr(xs)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


# ---------------------------------------------------------------- ANOVA / LSD


def _anova_parts(groups):
    gs = [_arr(g) for g in groups]
    if len(gs) < 2:
        raise StatsError("ANOVA needs at least two groups")
    if any(g.size < 2 for g in gs):
        raise StatsError("every group needs at least two values")
    n_total = sum(g.size for g in gs)
    grand = np.concatenate(gs).mean()
    ssb = float(sum(g.size * (g.mean() - grand) ** 2 for g in gs))
    ssw = float(sum(((g - g.mean()) ** 2).sum() for g in gs))
    return gs, ssb, ssw, len(gs) - 1, n_total - len(gs)


def anova_oneway(groups) -> TestResult:
    gs, ssb, ssw, df_b, df_w = _anova_parts(groups)
    msb, msw = ssb / df_b, ssw / df_w
    if msw == 0:
        if msb == 0:
            raise StatsError("all observations are identical; F is undefined")
        f, p = math.inf, 0.0
    else:
        f = msb / msw
        p = special.f_sf(f, df_b, df_w)
    return TestResult(f, p, (df_b, df_w), "one-way ANOVA",
                      {"ssb": ssb, "ssw": ssw, "msb": msb, "msw": msw,
                       "means": [float(g.mean()) for g in gs], "sizes": [int(g.size) for g in gs]})


def lsd_posthoc(groups, alpha: float = 0.05) -> dict:
    """Fisher LSD: {(i, j): {diff, t, p, df, significant}} for every ordered pair i != j."""
    gs, _, ssw, _, df_w = _anova_parts(groups)
    msw = ssw / df_w
    out = {}
    for i, j in itertools.permutations(range(len(gs)), 2):
        diff = float(gs[i].mean() - gs[j].mean())
        se = math.sqrt(msw * (1.0 / gs[i].size + 1.0 / gs[j].size))
        if se == 0:
            t = 0.0 if diff == 0 else math.copysign(math.inf, diff)
        else:
            t = diff / se
        p = special.t_two_sided(t, df_w)
        out[(i, j)] = {"diff": diff, "t": t, "p": p, "df": df_w, "significant": p < alpha}
    return out


# ---------------------------------------------------------------- correlation / t tests


def pearson_r(xs, ys) -> TestResult:
    x, y = _arr(xs), _arr(ys)
    if x.size != y.size:
        raise StatsError("xs and ys differ in length")
    n = x.size
    if n < 3:
        raise StatsError("Pearson correlation needs at least three pairs")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise StatsError("correlation undefined for a constant variable")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        t, p = math.copysign(math.inf, r), 0.0
    else:
        t = r * math.sqrt((n - 2) / (1 - r * r))
        p = special.t_two_sided(t, n - 2)
    return TestResult(r, p, n - 2, "Pearson correlation", {"t": t})


def paired_t(xs, ys) -> TestResult:
    x, y = _arr(xs), _arr(ys)
    if x.size != y.size:
        raise StatsError("xs and ys differ in length")
    if x.size < 2:
        raise StatsError("paired t-test needs at least two pairs")
    d = x - y
    mean, sd = float(d.mean()), float(d.std(ddof=1))
    df = d.size - 1
    if sd == 0:
        if mean == 0:
            return TestResult(0.0, 1.0, df, "paired t-test", {"mean_diff": 0.0})
        raise StatsError("differences have zero variance; t is undefined")
    t = mean / (sd / math.sqrt(d.size))
    return TestResult(t, special.t_two_sided(t, df), df, "paired t-test", {"mean_diff": mean})


def pooled_t(xs, ys) -> TestResult:
    """Two-sample Student t with pooled variance."""
    x, y = _arr(xs), _arr(ys)
    nx, ny = x.size, y.size
    df = nx + ny - 2
    sp2 = (((x - x.mean()) ** 2).sum() + ((y - y.mean()) ** 2).sum()) / df
    t = (x.mean() - y.mean()) / math.sqrt(sp2 * (1 / nx + 1 / ny))
    return TestResult(float(t), special.t_two_sided(float(t), df), df, "pooled two-sample t-test")


# ---------------------------------------------------------------- Wilcoxon


def signed_rank_sums(xs, ys):
    """(W+, W-, mid-ranks of |d|, signs) after dropping zero differences."""
    d = _arr(xs) - _arr(ys)
    d = d[d != 0]
    if d.size == 0:
        raise StatsError("all differences are zero")
    ranks = rankdata(np.abs(d))
    return float(ranks[d > 0].sum()), float(ranks[d < 0].sum()), ranks, np.sign(d)


def exact_signed_rank_null(ranks) -> np.ndarray:
    """W+ (doubled, as integers) under every one of the 2^m sign assignments."""
    r2 = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    sums = np.zeros(1, dtype=np.int64)
    for r in r2:
        sums = np.concatenate([sums, sums + r])
    return sums


def wilcoxon_signed_rank(xs, ys, method: str = "auto") -> TestResult:
    """Two-sided signed-rank test with W = min(W+, W-).

    ``method``: "exact" enumerates all sign assignments, "normal" uses the
    tie- and continuity-corrected normal approximation, "auto" picks exact
    for m <= 20 nonzero differences.
    """
    wp, wm, ranks, _ = signed_rank_sums(xs, ys)
    m = ranks.size
    w = min(wp, wm)
    if method == "auto":
        method = "exact" if m <= WILCOXON_EXACT_MAX else "normal"
    extra = {"w_plus": wp, "w_minus": wm, "n_nonzero": m}
    if method == "exact":
        null = exact_signed_rank_null(ranks)
        tail = float(np.count_nonzero(null <= round(2 * w))) / null.size
        extra["one_sided_p"] = tail
        return TestResult(w, min(1.0, 2 * tail), None, "Wilcoxon signed-rank (exact)", extra)
    if method != "normal":
        raise StatsError(f"unknown method {method!r}")
    mu = m * (m + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = m * (m + 1) * (2 * m + 1) / 24.0 - float(((counts ** 3 - counts).sum())) / 48.0
    z = min(0.0, (w - mu + 0.5) / math.sqrt(var))
    extra["z"] = z
    return TestResult(w, min(1.0, 2 * special.norm_cdf(z)), None, "Wilcoxon signed-rank (normal)", extra)


# ---------------------------------------------------------------- regression


def solve_pivoted(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting on [a | b]; b may be a matrix."""
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    vec = b.ndim == 1
    if vec:
        b = b[:, None]
    n = a.shape[0]
    scale = np.abs(a).max() or 1.0
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[piv, col]) <= 1e-12 * scale:
            raise StatsError("design matrix is singular (collinear predictors)")
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            b[[col, piv]] = b[[piv, col]]
        for row in range(col + 1, n):
            f = a[row, col] / a[col, col]
            if f:
                a[row, col:] -= f * a[col, col:]
                b[row] -= f * b[col]
    x = np.zeros_like(b)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1:] @ x[row + 1:]) / a[row, row]
    return x[:, 0] if vec else x


@dataclass
class OlsResult:
    coef: np.ndarray  # intercept first when fitted with one
    se: np.ndarray
    t: np.ndarray
    p: np.ndarray
    r2: float
    sse: float
    df_resid: int
    names: list = field(default_factory=list)
    beta: np.ndarray | None = None  # standardized slopes (intercept excluded)

    def to_dict(self) -> dict:
        return {"names": self.names, "coef": self.coef.tolist(), "se": self.se.tolist(),
                "t": self.t.tolist(), "p": self.p.tolist(), "r2": self.r2, "df_resid": self.df_resid,
                "beta": None if self.beta is None else self.beta.tolist()}


def ols(y, X=None, names=None, intercept: bool = True) -> OlsResult:
    """Least squares through the normal equations (pivoted elimination)."""
    y = _arr(y)
    n = y.size
    cols = [] if X is None else [np.asarray(X, dtype=np.float64).reshape(n, -1)]
    if intercept:
        cols.insert(0, np.ones((n, 1)))
    A = np.hstack(cols)
    k = A.shape[1]
    if n < k:
        raise StatsError("fewer observations than coefficients")
    xtx = A.T @ A
    coef = solve_pivoted(xtx, A.T @ y)
    resid = y - A @ coef
    sse = float(resid @ resid)
    sst = float(((y - y.mean()) ** 2).sum())
    # intercept-only is exactly 0, not rounding noise around it
    r2 = 0.0 if sst == 0 or (intercept and k == 1) else 1.0 - sse / sst
    df = n - k
    if df > 0:
        cov = (sse / df) * solve_pivoted(xtx, np.eye(k))
        se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    else:
        se = np.full(k, np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = coef / se
    p = np.array([1.0 if np.isnan(ti) else special.t_two_sided(float(ti), df) if df > 0 else 1.0 for ti in t])
    beta = None
    if intercept and k > 1 and y.std() > 0:
        sx = A[:, 1:].std(axis=0)
        beta = coef[1:] * sx / y.std()
    labels = (["intercept"] if intercept else []) + list(names or [f"x{j}" for j in range(k - int(intercept))])
    return OlsResult(coef, se, t, p, r2, sse, df, labels, beta)


@dataclass
class StepModel:
    variables: list
    fit: OlsResult

    @property
    def r2(self) -> float:
        return self.fit.r2


def stepwise_forward(y, candidates: dict, alpha_in: float = 0.05) -> list:
    """Forward selection: repeatedly add the candidate with the smallest p < alpha_in.

    Returns the model after each addition; an intercept-only model when no
    candidate ever qualifies.
    """
    y = _arr(y)
    chosen, models = [], []
    remaining = list(candidates)
    while remaining:
        best = None
        for name in remaining:
            vars_ = chosen + [name]
            try:
                fit = ols(y, np.column_stack([candidates[v] for v in vars_]), vars_)
            except StatsError:
                continue
            p = fit.p[-1]
            if best is None or p < best[0]:
                best = (p, name, fit)
        if best is None or not best[0] < alpha_in:
            break
        chosen.append(best[1])
        remaining.remove(best[1])
        models.append(StepModel(list(chosen), best[2]))
        if best[2].sse == 0:
            break
    if not models:
        models.append(StepModel([], ols(y)))
    return models


# ---------------------------------------------------------------- normality


def ks_normality(xs) -> TestResult:
    """One-sample KS against a normal with the sample mean and std.

    The p-value uses the asymptotic Kolmogorov distribution at sqrt(n) * D and
    ignores that the parameters were estimated, so it is anti-conservative.
    """
    x = np.sort(_arr(xs))
    n = x.size
    if n < 4:
        raise StatsError("KS normality test needs at least four values")
    sd = x.std(ddof=1)
    if sd == 0:
        raise StatsError("KS normality test undefined for constant data")
    cdf = np.array([special.norm_cdf(v) for v in (x - x.mean()) / sd])
    i = np.arange(1, n + 1)
    d = float(max((i / n - cdf).max(), (cdf - (i - 1) / n).max()))
    return TestResult(d, special.kolmogorov_sf(math.sqrt(n) * d), None, "Kolmogorov-Smirnov normality")


# ---------------------------------------------------------------- reader study


@dataclass(frozen=True)
class ReaderRecord:
    participant_id: str
    hospital_rank: str
    title: str
    years: float
    acc_image_only: float
    acc_with_history: float

    @property
    def years_band(self) -> str:
        y = self.years
        if y <= 5:
            return "1-5"
        if y <= 10:
            return "6-10"
        if y <= 15:
            return "11-15"
        if y <= 20:
            return "16-20"
        return ">20"


def read_readers(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != READER_COLUMNS:
            raise ReaderCsvError(f"header must be {','.join(READER_COLUMNS)}", 1)
        out = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(READER_COLUMNS):
                raise ReaderCsvError(f"expected {len(READER_COLUMNS)} fields, got {len(row)}", line)
            pid, hosp, title, years, a0, a1 = (c.strip() for c in row)
            if hosp not in HOSPITAL_RANKS:
                raise ReaderCsvError(f"unknown hospital_rank {hosp!r}", line)
            if title not in TITLES:
                raise ReaderCsvError(f"unknown title {title!r}", line)
            try:
                yv, v0, v1 = float(years), float(a0), float(a1)
            except ValueError:
                raise ReaderCsvError("years and accuracies must be numbers", line) from None
            if yv < 0:
                raise ReaderCsvError("years must be non-negative", line)
            if not (0 <= v0 <= 1 and 0 <= v1 <= 1):
                raise ReaderCsvError("accuracies must lie in [0, 1]", line)
            out.append(ReaderRecord(pid, hosp, title, yv, v0, v1))
    return out


def _safe(fn, *args, **kw):
    try:
        res = fn(*args, **kw)
    except StatsError as e:
        return {"error": str(e)}
    return res.to_dict() if hasattr(res, "to_dict") else res


def _grouped(records, key, levels):
    groups = {lv: [r.acc_image_only for r in records if getattr(r, key) == lv] for lv in levels}
    return {lv: g for lv, g in groups.items() if len(g) >= 2}


def _lsd_rows(names, table):
    return [{"a": names[i], "b": names[j], **v} for (i, j), v in table.items() if i < j]


def reader_report(records, alpha: float = 0.05) -> dict:
    """Every reader-study analysis, keyed by test name (JSON-serializable)."""
    if len(records) < 4:
        raise StatsError("need at least four reader records")
    a0 = np.array([r.acc_image_only for r in records])
    a1 = np.array([r.acc_with_history for r in records])
    rep = {
        "n": len(records),
        "describe": {"acc_image_only": _safe(describe, a0), "acc_with_history": _safe(describe, a1)},
        "ks_normality": {"acc_image_only": _safe(ks_normality, a0), "acc_with_history": _safe(ks_normality, a1),
                         "difference": _safe(ks_normality, a1 - a0)},
    }
    for key, levels in (("hospital_rank", HOSPITAL_RANKS), ("title", TITLES), ("years_band", YEARS_BANDS)):
        groups = _grouped(records, key, levels)
        names = list(groups)
        rep[f"anova_{key}"] = _safe(anova_oneway, list(groups.values())) | {"groups": names} \
            if len(groups) >= 2 else {"error": "fewer than two groups with >= 2 readers"}
        if len(groups) >= 2:
            try:
                rep[f"lsd_{key}"] = _lsd_rows(names, lsd_posthoc(list(groups.values()), alpha))
            except StatsError as e:
                rep[f"lsd_{key}"] = {"error": str(e)}
    years = np.array([r.years for r in records])
    rep["pearson_years"] = _safe(pearson_r, years, a0)
    cands = {
        "hospital_rank": np.array([HOSPITAL_RANKS.index(r.hospital_rank) + 1 for r in records], dtype=float),
        "title": np.array([TITLES.index(r.title) + 1 for r in records], dtype=float),
        "years": years,
    }
    steps = stepwise_forward(a0, cands, alpha)
    rep["stepwise_regression"] = [{"model": i + 1, "variables": s.variables, **s.fit.to_dict()}
                                  for i, s in enumerate(steps)]
    rep["paired_t"] = _safe(paired_t, a1, a0)
    rep["wilcoxon_signed_rank"] = _safe(wilcoxon_signed_rank, a1, a0)
    ks_diff = rep["ks_normality"]["difference"]
    normal = "p_value" in ks_diff and ks_diff["p_value"] >= alpha
    rep["paired_test_selected"] = "paired_t" if normal else "wilcoxon_signed_rank"
    return rep
