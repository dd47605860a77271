"""Small constructors shared by the test modules."""
import numpy as np

from onramp.kinematics import Track


def make_track(vid, x, lanes, t0=0.0, dt=0.2, y=None):
    """Track from positions with lateral position taken from the lane."""
    x = np.asarray(x, dtype=float)
    lanes = np.broadcast_to(np.asarray(lanes, dtype=int), x.shape).copy()
    if y is None:
        y = np.where(lanes == 7, 0.0, 3.7)
    return Track.from_positions(vid, t0, dt, x, np.asarray(y, dtype=float), lanes)
