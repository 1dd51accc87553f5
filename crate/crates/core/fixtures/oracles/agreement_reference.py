"""Reference values for tests/agreement.rs (numpy + scipy).

ICC(A,1) is computed from a long-format two-way ANOVA (McGraw & Wong),
correlations with scipy.stats, kappa from the quadratic form over a
weight matrix.
"""
import numpy as np
from scipy import stats

ICC_PAIRS = [(9, 2), (6, 1), (8, 4), (7, 1), (10, 5), (6, 2)]
BA_PAIRS = [(10.0, 12.0), (20.0, 19.0), (30.0, 35.0), (40.0, 38.0)]
KAPPA = np.array([[50, 6, 1, 0], [8, 30, 5, 1], [2, 7, 25, 4], [0, 1, 6, 40]], float)


def icc_a1(pairs):
    y = np.array(pairs, float)
    n, k = y.shape
    subj = np.repeat(np.arange(n), k)
    rater = np.tile(np.arange(k), n)
    v = y.ravel()
    g = v.mean()
    ss_r = sum(k * (v[subj == i].mean() - g) ** 2 for i in range(n))
    ss_c = sum(n * (v[rater == j].mean() - g) ** 2 for j in range(k))
    ss_t = ((v - g) ** 2).sum()
    ss_e = ss_t - ss_r - ss_c
    msr, msc, mse = ss_r / (n - 1), ss_c / (k - 1), ss_e / ((n - 1) * (k - 1))
    return (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)


def kappa_linear(m):
    n = m.sum()
    i, j = np.indices(m.shape)
    w = np.abs(i - j) / (m.shape[0] - 1)
    expected = np.outer(m.sum(1), m.sum(0)) / n
    return 1 - (w * m).sum() / (w * expected).sum()


print(f"icc {icc_a1(ICC_PAIRS):.15f}")
x, y = zip(*ICC_PAIRS)
print(f"pearson {stats.pearsonr(x, y)[0]:.15f} spearman {stats.spearmanr(x, y)[0]:.15f}")
d = np.array([b - a for a, b in BA_PAIRS])
sd = d.std(ddof=1)
print(f"ba mean {d.mean():.15f} sd {sd:.15f} lo {d.mean() - 1.96 * sd:.15f} hi {d.mean() + 1.96 * sd:.15f}")
print(f"kappa {kappa_linear(KAPPA):.15f}")
