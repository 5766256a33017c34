"""Dice metric and the three-part one-shot validation protocol."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datastore import ClientDataset, Volume
from .episodes import middle_index, split_parts
from .protoseg import ProtoConfig, encode, segment_features
from .tensor import ModelParams, no_grad

THRESHOLD = 0.5


def dice_score(pred, gt) -> float:
    """``2|P & G| / (|P| + |G|)``; 1.0 when both are empty."""
    p = np.asarray(pred) > 0
    g = np.asarray(gt) > 0
    if p.shape != g.shape:
        raise ValueError(f"dice_score: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


@dataclass
class DiceReport:
    """Dice in percent per class, per scan and aggregated over evaluated scans."""

    per_scan: dict[int, dict[str, float]] = field(default_factory=dict)
    skipped_parts: dict[int, int] = field(default_factory=dict)

    def classes(self) -> list[int]:
        return sorted(set(self.per_scan) | set(self.skipped_parts))

    def class_mean(self, class_id: int) -> float | None:
        scans = self.per_scan.get(class_id)
        if not scans:
            return None
        return float(np.mean(list(scans.values())))

    def aggregate(self) -> float | None:
        values = [v for scans in self.per_scan.values() for v in scans.values()]
        return float(np.mean(values)) if values else None

    def to_dict(self) -> dict:
        return {
            "per_class": {str(c): self.class_mean(c) for c in self.classes()},
            "per_scan": {str(c): dict(s) for c, s in self.per_scan.items()},
            "skipped_parts": {str(c): n for c, n in self.skipped_parts.items()},
            "aggregate": self.aggregate(),
        }


def support_slices(n_slices: int, n_parts: int = 3) -> list[int]:
    return [middle_index(n_slices, p, n_parts) for p in range(n_parts)]


def _encode_scan(params: ModelParams, vol: Volume, slices=None):
    idx = range(vol.n_slices) if slices is None else slices
    return {z: encode(params, vol.voxels[z]) for z in idx}


def one_shot_validate(params: ModelParams, client: ClientDataset, class_ids, cfg: ProtoConfig = ProtoConfig(),
                      n_parts: int = 3, scans: list[Volume] | None = None) -> DiceReport:
    """Segment every validation slice from the matching part's support middle slice.

    Support and query scans are cut into ``n_parts`` index-aligned parts. Per
    scan, intersections and areas are pooled over all evaluated slices
    (volumetric dice). Parts whose support slice lacks the class are skipped.
    """
    if isinstance(class_ids, (int, np.integer)):
        class_ids = [int(class_ids)]
    scans = client.validation if scans is None else scans
    support = client.support
    if support.labels is None:
        raise ValueError(f"support scan {support.scan_id} of {client.client_id} has no labels")
    report = DiceReport()
    s_idx = support_slices(support.n_slices, n_parts)
    with no_grad():
        s_feats = _encode_scan(params, support, s_idx)
        q_feats = [_encode_scan(params, vol) for vol in scans]
        for cid in class_ids:
            report.per_scan.setdefault(cid, {})
            report.skipped_parts[cid] = 0
            s_masks = [(support.labels[z] == cid).astype(np.uint8) for z in s_idx]
            for vol, feats in zip(scans, q_feats):
                inter = area = 0
                evaluated = False
                for p, (start, length) in enumerate(split_parts(vol.n_slices, n_parts)):
                    if not s_masks[p].any():
                        report.skipped_parts[cid] += 1
                        continue
                    evaluated = True
                    for z in range(start, start + length):
                        prob = segment_features(s_feats[s_idx[p]], s_masks[p], feats[z],
                                                *vol.voxels.shape[1:], cfg)
                        pred = prob.data[1] > THRESHOLD
                        gt = vol.labels[z] == cid
                        inter += int((pred & gt).sum())
                        area += int(pred.sum()) + int(gt.sum())
                if evaluated:
                    report.per_scan[cid][vol.scan_id] = 100.0 * (2.0 * inter / area if area else 1.0)
    return report
