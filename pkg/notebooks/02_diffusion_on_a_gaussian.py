"""
Sampling a 1-D Gaussian with an exact noise predictor
=====================================================

For Gaussian data the optimal noise prediction has a closed form, so the
samplers can be checked without training anything.
"""

from pathdiff import diffusion as dif
from pathdiff.verify import gaussian_sampling

s = dif.build_schedule(1000)
print("alpha_bar at T:", s.alpha_bar[-1])

for mu, s2 in [(0.5, 0.25), (-1.0, 0.04), (2.0, 1.0)]:
    m, v = gaussian_sampling(10_000, mu, s2, "ddpm")
    md, vd = gaussian_sampling(10_000, mu, s2, "ddim", steps=50)
    print(f"N({mu}, {s2}): ddpm mean {m:.3f} var {v:.4f} | ddim mean {md:.3f} var {vd:.4f}")

# quadratic spacing spends more of the budget near t = 1
print(dif.ddim_timesteps(1000, 8))
print(dif.ddim_timesteps(1000, 8, "linear"))
