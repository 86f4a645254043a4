"""Regenerates the synthetic fixtures in this directory.

sst_fixture.csv     lon/lat anomaly field on a 2-degree Pacific grid drawn
                    from the model in cobe_model.json (chordal distance).
jura_synthetic.csv  359 points over the Jura bounding box drawn from a
                    nested spherical model (sills 50, 50, nugget 20).
                    Synthetic stand-in, not the real Jura measurements.
"""
import numpy as np


def spherical(h, a):
    x = np.minimum(h / a, 1.0)
    return 1.0 - 1.5 * x + 0.5 * x**3


def matern15(h, scale):
    u = np.sqrt(3.0) * h / scale
    return (1.0 + u) * np.exp(-u)


def sample(cov, mean, rng):
    L = np.linalg.cholesky(cov + 1e-10 * np.eye(len(cov)))
    return mean + L @ rng.standard_normal(len(cov))


def sst():
    rng = np.random.default_rng(43799)
    lon, lat = np.meshgrid(np.arange(120.0, 252.0, 2.0), np.arange(-30.0, 32.0, 2.0))
    lon, lat = lon.ravel(), lat.ravel()
    lo, la = np.radians(lon), np.radians(lat)
    xyz = np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], 1)
    h = np.linalg.norm(xyz[:, None, :] - xyz[None, :, :], axis=2)
    cov = 0.2592 * matern15(h, 0.132848) + 0.0008 * np.eye(len(h))
    z = sample(cov, 0.002, rng)
    with open("sst_fixture.csv", "w") as f:
        f.write("lon,lat,anomaly\n")
        for a, b, c in zip(lon, lat, z):
            f.write(f"{a:.1f},{b:.1f},{c:.6f}\n")


def jura():
    rng = np.random.default_rng(359)
    x = rng.uniform(0.3, 5.0, 359)
    y = rng.uniform(0.5, 5.8, 359)
    h = np.hypot(x[:, None] - x[None, :], y[:, None] - y[None, :])
    cov = 50.0 * spherical(h, 0.15) + 50.0 * spherical(h, 0.65) + 20.0 * np.eye(359)
    z = sample(cov, 35.0, rng)
    with open("jura_synthetic.csv", "w") as f:
        f.write("x,y,cr\n")
        for a, b, c in zip(x, y, z):
            f.write(f"{a:.4f},{b:.4f},{c:.4f}\n")


if __name__ == "__main__":
    sst()
    jura()
