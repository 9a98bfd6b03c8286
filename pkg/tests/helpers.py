import numpy as np


def straight_line(start, goal, H):
    """d x (H+1) array of equally spaced points from start to goal."""
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    s = np.linspace(0.0, 1.0, H + 1)
    return start[:, None] + (goal - start)[:, None] * s[None, :]


def polygon(n, radius=1.0, laps=1):
    """Closed regular n-gon traversed `laps` times, as a 2 x (n*laps+1) array."""
    angles = 2.0 * np.pi * np.arange(n * laps + 1) / n
    return radius * np.vstack([np.cos(angles), np.sin(angles)])
