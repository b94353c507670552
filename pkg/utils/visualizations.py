"""
Tabular and image renderings of analysis results.

Figures are drawn by external plotting tools from these CSV tables; the
functions here only shape results into DataFrames and 8-bit images.
"""

from typing import List

import numpy as np
import pandas as pd

from utils.calculations import FeatureMapSet, LabelGrid, OccupancyCurves, OutputStats, ProbeResponse, StateReport
from utils.data_processing import PatchBatch
from utils.image_processing import Image
from utils.information import ToyExampleResult
from utils.training import TrainReport


def create_loss_table(report: TrainReport) -> pd.DataFrame:
    """Per-epoch mean loss and learning rate"""
    return pd.DataFrame({
        "epoch": np.arange(len(report.epoch_losses)),
        "loss": report.epoch_losses,
        "lr": report.epoch_lrs,
    })


def create_histogram_table(stats: OutputStats) -> pd.DataFrame:
    edges = stats.histogram_edges
    return pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "count": stats.histogram_counts})


def create_activation_table(stats: OutputStats) -> pd.DataFrame:
    return pd.DataFrame({"node": np.arange(stats.activation_prob.size), "prob": stats.activation_prob})


def create_code_proportion_table(stats: OutputStats) -> pd.DataFrame:
    """Sample proportion of each distinct code, most frequent first"""
    return pd.DataFrame({"rank": np.arange(stats.code_proportions.size), "proportion": stats.code_proportions})


def create_active_count_table(stats: OutputStats) -> pd.DataFrame:
    counts = stats.active_count_histogram
    return pd.DataFrame({"active": np.arange(counts.size), "count": counts})


def create_state_table(report: StateReport) -> pd.DataFrame:
    return pd.DataFrame({"state": np.arange(report.q.size), "mass": report.q})


def create_label_grid_table(grid: LabelGrid) -> pd.DataFrame:
    """One row per grid cell and output dimension"""
    R, _, D = grid.labels.shape
    y, x, dim = np.meshgrid(np.arange(R), np.arange(R), np.arange(D), indexing="ij")
    return pd.DataFrame({
        "x": x.ravel(),
        "y": y.ravel(),
        "dim": dim.ravel(),
        "label": grid.labels.ravel(),
    })


def create_occupancy_table(curves: OccupancyCurves) -> pd.DataFrame:
    A, width = curves.counts.shape
    anchor = np.repeat(curves.anchors, width)
    d = np.tile(np.arange(width), A)
    return pd.DataFrame({
        "anchor": anchor,
        "d": d,
        "count": curves.counts.ravel(),
        "rate": curves.rates.ravel(),
    })


def create_cumulative_occupancy_table(curves: OccupancyCurves) -> pd.DataFrame:
    A, width = curves.cumulative.shape
    return pd.DataFrame({
        "anchor": np.repeat(curves.anchors, width),
        "d": np.tile(np.arange(width), A),
        "cumulative": curves.cumulative.ravel(),
    })


def create_probe_table(response: ProbeResponse) -> pd.DataFrame:
    rows = [
        {"node": node, "start_col": start, "end_col": end}
        for node, segments in enumerate(response.intervals)
        for start, end in segments
    ]
    return pd.DataFrame(rows, columns=["node", "start_col", "end_col"])


def create_toy_curve_table(result: ToyExampleResult) -> pd.DataFrame:
    return pd.DataFrame({"r": result.hq_curve[:, 0], "hq_minus_logM": result.hq_curve[:, 1]})


def create_feature_map_images(feature_set: FeatureMapSet) -> List[Image]:
    """8-bit grayscale image per node with value round(255 * output)"""
    pixels = np.clip(np.floor(255.0 * feature_set.maps.astype(np.float64) + 0.5), 0, 255).astype(np.uint8)
    return [Image.from_array(node_map) for node_map in pixels]


def create_patch_table(batch: PatchBatch) -> pd.DataFrame:
    """Source image and top-left corner of every patch, in code order"""
    return pd.DataFrame(batch.descriptors, columns=["image", "x", "y", "flipped"])
