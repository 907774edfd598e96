"""Brute-force ray-versus-point-cloud occlusion, used to check the shadow maps.

Each cloud point is treated as a disc facing the light whose radius matches
its shadow-map splat at the point's distance. A receiver is
shadowed when any disc nearer the light (by more than the receiver's bias)
crosses the segment from the light to the receiver.
"""

import numpy as np

from .renderer import ShadowConfig, cube_lookup, receiver_bias, splat_half_angle


def splat_radius(offsets, resolution, splat):
    """World-space radius of each point's splat disc (point-minus-light ``offsets``)."""
    _, _, _, su, sv, _ = cube_lookup(offsets, resolution)
    dist = np.linalg.norm(offsets, axis=1)
    return dist * np.sin(splat_half_angle(su, sv, resolution, splat))


def occlusion_oracle(cloud, light_position, cfg=ShadowConfig(), chunk_elems=4_000_000):
    """Per-pixel visibility ``(H, W)`` by testing every receiver against every point."""
    L = np.asarray(light_position, float)
    bias = cfg.resolve_bias(cloud)
    pts = cloud.valid_points()
    Q = pts - L
    dq = np.linalg.norm(Q, axis=1)
    rad2 = splat_radius(Q, cfg.resolution, cfg.splat) ** 2

    X = pts
    D = X - L
    dx = np.linalg.norm(D, axis=1)
    U = D / dx[:, None]
    bx = receiver_bias(D, cloud.normals[cloud.mask], cfg.resolution, cfg.splat, bias,
                       cfg.slope_bias, cfg.max_slope)

    keep = dq < np.max(dx - bx)
    Q, dq, rad2 = Q[keep], dq[keep], rad2[keep]
    dq2 = dq * dq

    lit = np.ones(len(X), dtype=bool)
    step = max(1, chunk_elems // max(1, len(Q)))
    for s in range(0, len(X), step):
        u = U[s:s + step]
        proj = Q @ u.T                                # (m, n) along-ray coordinate
        perp2 = dq2[:, None] - proj * proj
        nearer = dq[:, None] < (dx[s:s + step] - bx[s:s + step])[None, :]
        hit = (proj > 0) & nearer & (perp2 < rad2[:, None])
        lit[s:s + step] = ~hit.any(axis=0)

    S = np.ones(cloud.shape)
    S[cloud.mask] = lit.astype(float)
    return S
