"""Link geometry: link-local frame, excess path length and its rate of change.

All position arguments accept either a single point ``(x, y)`` or an array of
shape ``(..., 2)``; results broadcast accordingly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s

# Positions closer than this to a link endpoint are treated as coincident.
ENDPOINT_TOL = 1e-9


class DegeneratePositionError(ValueError):
    """Raised when a point coincides with a link endpoint."""


class Point2(NamedTuple):
    x: float
    y: float


class Velocity2(NamedTuple):
    vx: float
    vy: float

    @property
    def speed(self) -> float:
        return float(np.hypot(self.vx, self.vy))

    @property
    def heading(self) -> float:
        return float(np.arctan2(self.vy, self.vx))


class LinkLocalCoords(NamedTuple):
    along: float
    perp: float


@dataclass(frozen=True)
class Link:
    """A transmitter/receiver pair.

    ``wavelength`` is derived from ``carrier_frequency`` (c0 / f_c).
    """

    id: str
    p_tx: Point2
    p_rx: Point2
    carrier_frequency: float = 2.4e9

    def __post_init__(self):
        object.__setattr__(self, "p_tx", Point2(*map(float, self.p_tx)))
        object.__setattr__(self, "p_rx", Point2(*map(float, self.p_rx)))
        if not np.all(np.isfinite(self.p_tx + self.p_rx)):
            raise ValueError(f"link {self.id}: non-finite endpoint")
        if self.length <= ENDPOINT_TOL:
            raise ValueError(f"link {self.id}: transmitter and receiver coincide")
        if not self.carrier_frequency > 0:
            raise ValueError(f"link {self.id}: carrier frequency must be positive")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def length(self) -> float:
        return float(np.hypot(self.p_rx.x - self.p_tx.x, self.p_rx.y - self.p_tx.y))

    @property
    def direction(self) -> np.ndarray:
        """Unit vector from TX towards RX."""
        return (np.asarray(self.p_rx) - np.asarray(self.p_tx)) / self.length

    @property
    def normal(self) -> np.ndarray:
        """Unit vector pointing to the left of the TX->RX direction."""
        ux, uy = self.direction
        return np.array([-uy, ux])

    @property
    def angle(self) -> float:
        """Orientation of the TX->RX direction in the world frame [rad]."""
        ux, uy = self.direction
        return float(np.arctan2(uy, ux))


def _as_points(p) -> np.ndarray:
    return np.asarray(p, dtype=float)


def _scalarize(value: np.ndarray):
    return float(value) if np.ndim(value) == 0 else value


def _endpoint_distances(p: np.ndarray, link: Link) -> tuple[np.ndarray, np.ndarray]:
    d_rx = np.hypot(p[..., 0] - link.p_rx.x, p[..., 1] - link.p_rx.y)
    d_tx = np.hypot(p[..., 0] - link.p_tx.x, p[..., 1] - link.p_tx.y)
    return d_rx, d_tx


def _check_off_endpoints(d_rx: np.ndarray, d_tx: np.ndarray, link: Link) -> None:
    if np.any(d_rx <= ENDPOINT_TOL) or np.any(d_tx <= ENDPOINT_TOL):
        raise DegeneratePositionError(f"position coincides with an endpoint of link {link.id}")


def to_link_local(p, link: Link):
    """World coordinates to (along, perp) in the frame of ``link``.

    ``along`` is measured from the transmitter towards the receiver, ``perp``
    is positive on the left of that direction.
    """
    rel = _as_points(p) - np.asarray(link.p_tx)
    along = rel @ link.direction
    perp = rel @ link.normal
    if np.ndim(along) == 0:
        return LinkLocalCoords(float(along), float(perp))
    return LinkLocalCoords(along, perp)


def from_link_local(coords: LinkLocalCoords, link: Link) -> np.ndarray:
    along = np.asarray(coords.along, dtype=float)[..., None]
    perp = np.asarray(coords.perp, dtype=float)[..., None]
    return np.asarray(link.p_tx) + along * link.direction + perp * link.normal


def excess_path_length(p, link: Link, *, check: bool = True):
    """Extra distance of the single-bounce path via ``p`` over the LoS path [m]."""
    p = _as_points(p)
    d_rx, d_tx = _endpoint_distances(p, link)
    if check:
        _check_off_endpoints(d_rx, d_tx, link)
    # Clamp round-off below zero for points on the LoS segment.
    return _scalarize(np.maximum(d_rx + d_tx - link.length, 0.0))


def unit_vector_sum(p, link: Link, *, check: bool = True) -> np.ndarray:
    """Sum of the unit vectors pointing from RX and from TX towards ``p``.

    Where ``check`` is False, rows at an endpoint come back as NaN.
    """
    p = _as_points(p)
    d_rx, d_tx = _endpoint_distances(p, link)
    if check:
        _check_off_endpoints(d_rx, d_tx, link)
    with np.errstate(divide="ignore", invalid="ignore"):
        u_rx = (p - np.asarray(link.p_rx)) / d_rx[..., None]
        u_tx = (p - np.asarray(link.p_tx)) / d_tx[..., None]
        out = u_rx + u_tx
    bad = (d_rx <= ENDPOINT_TOL) | (d_tx <= ENDPOINT_TOL)
    if np.any(bad):
        out = np.where(bad[..., None], np.nan, out)
    return out


def path_length_rate(p, v, link: Link, *, check: bool = True):
    """Time derivative of the excess path length for a reflector at ``p``
    moving with velocity ``v`` [m/s]."""
    s = unit_vector_sum(p, link, check=check)
    return _scalarize(np.sum(s * np.asarray(v, dtype=float), axis=-1))


def fresnel_zone_from_excess(delta, wavelength: float):
    """Fresnel zone number n with (n-1)*lambda/2 <= delta < n*lambda/2."""
    delta = np.asarray(delta, dtype=float)
    # Snap values within round-off of a boundary onto it (half-open convention).
    n = np.floor(delta / (0.5 * wavelength) + 1e-9).astype(int) + 1
    return int(n) if n.ndim == 0 else n


def fresnel_zone_index(p, link: Link):
    """Fresnel zone of the reflection via ``p``; 1 on the LoS segment."""
    return fresnel_zone_from_excess(excess_path_length(p, link), link.wavelength)
