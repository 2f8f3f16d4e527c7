import numpy as np
from scipy.special import betainc


def student_t_sf2(t, df):
    """Two-sided tail probability P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def two_sample_ttest(a, b):
    """Welch's unequal-variance t-test. Returns ``{"t", "df", "p"}``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least 2 values")
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    diff = a.mean() - b.mean()
    if se2 == 0:
        raise ValueError("both samples have zero variance")
    t = diff / np.sqrt(se2)
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return {"t": float(t), "df": float(df), "p": student_t_sf2(t, df)}
