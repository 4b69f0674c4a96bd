"""
Cylindrical voxels and the near/far split
=========================================

One synthetic frame goes through the cylindrical grid.  We look at how
points spread over cells and where the range threshold splits them.
"""
import numpy as np

from hilots.data import SYNTH_CLASSES, SyntheticSceneSpec, generate_synthetic_sequence
from hilots.geom import CylGridConfig, cartesian_to_cylindrical, partition_by_range, range_threshold, voxelize_frame

# a single 2048-point frame from the synthetic benchmark
seq = generate_synthetic_sequence(SyntheticSceneSpec(n_frames=1, seed=3)).sequences[0]
frame = seq.frames[0].load()
labels = seq.frames[0].load_labels()
print(f"{len(frame)} points, classes present: {[SYNTH_CLASSES[c] for c in np.unique(labels)]}")

# (x, y, z) -> (rho, theta, z)
cyl = cartesian_to_cylindrical(frame.points[:, :3])
print(f"rho in [{cyl[:, 0].min():.1f}, {cyl[:, 0].max():.1f}] m")

cfg = CylGridConfig.desk()
grid, mapping = voxelize_frame(frame, cfg)
print(f"grid {cfg.shape}: {len(mapping.cells)} occupied of {cfg.n_cells} cells")
print(f"points per occupied cell: mean {mapping.counts.mean():.2f}, max {mapping.counts.max()}")

# each occupied cell keeps the feature of its closest point
k = int(np.argmax(mapping.counts))
members = mapping.member_points[mapping.member_offsets[k]:mapping.member_offsets[k + 1]]
print(f"busiest cell holds points {members.tolist()}; survivor {mapping.survivor[k]} "
      f"(rho {cyl[mapping.survivor[k], 0]:.3f} vs member min {cyl[members, 0].min():.3f})")

# the farthest 70% of the radial range counts as far
thr = range_threshold(cfg, 0.7)
far, near = partition_by_range(grid, cfg, 0.7)
print(f"threshold {thr:.1f} m: {len(far)} far cells, {len(near)} near cells")

# far cells are sparse: compare points per cell on each side
rho_cells = cfg.cell_centers(mapping.cells)[:, 0]
print(f"mean points per cell  near {mapping.counts[rho_cells < thr].mean():.2f}  "
      f"far {mapping.counts[rho_cells >= thr].mean():.2f}")
