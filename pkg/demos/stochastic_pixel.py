"""One pixel, four fragments: stochastic opacity masking in numbers.

Draws many random thresholds, compares the winner frequencies with the
closed-form selection probabilities, then checks that the score-function
estimate of the alpha gradient matches exact enumeration.

    python3 demos/stochastic_pixel.py
"""
import numpy as np

from trisoup.stochastic import (BACKGROUND, draw_winners, expected_color, expected_loss_and_gradient,
                                l1_pixel_loss, outcome_probabilities, score_gradients)

rng = np.random.default_rng(0)
depths = np.array([2.0, 0.5, 3.0, 1.0])
alphas = np.array([0.7, 0.3, 0.9, 0.5])
colors = rng.random((4, 3))
background = np.ones(3)
gt = np.array([0.2, 0.4, 0.6])
n = 400_000

w = draw_winners(depths, alphas, rng, n)
slot = np.where(w == BACKGROUND, len(depths), w)
p = outcome_probabilities(depths, alphas)
freq = np.bincount(slot, minlength=len(p)) / n
print("outcome      p(f)    frequency")
for k, (a, b) in enumerate(zip(p, freq)):
    name = "background" if k == len(depths) else f"fragment {k}"
    print(f"{name:<12}{a:8.4f}{b:11.4f}")

samples = np.where((w == BACKGROUND)[:, None], background, colors[np.maximum(w, 0)])
print("\nexpected colour ", np.round(expected_color(depths, alphas, colors, background), 4))
print("mean of samples ", np.round(samples.mean(axis=0), 4))

losses = np.array([l1_pixel_loss(c, gt) for c in colors] + [l1_pixel_loss(background, gt)])
est = score_gradients(depths, alphas, w, losses[slot])
_, exact = expected_loss_and_gradient(depths, alphas, colors, gt, background)
se = est.std(axis=0, ddof=1) / np.sqrt(n)
print("\nd E[loss] / d alpha")
print("exact     ", np.round(exact, 4))
print("estimate  ", np.round(est.mean(axis=0), 4))
print("std error ", np.round(se, 4))
