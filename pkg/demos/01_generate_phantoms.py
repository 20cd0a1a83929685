"""Generate a few phantom cases and render axial mosaics of each cohort.

Run:  python demos/01_generate_phantoms.py [out_dir]

Writes PNG contact sheets showing the three contrast phases and the semantic
labels for one normal, one hard-normal, and one tumor case.
"""

import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from planseg.phantom import GeneratorConfig, generate_case

out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out/phantoms")
out_dir.mkdir(parents=True, exist_ok=True)

cfg = GeneratorConfig()
for cohort, seed in (("normal", 1), ("hard_normal", 2), ("tumor", 3)):
    rec = generate_case(seed, cohort, cfg)
    z = rec.semantic.shape[2] // 2
    if rec.instances:  # center the view on the first lesion
        z = int(np.median(rec.instances[0].voxels[:, 2]))
    fig, axes = plt.subplots(1, 4, figsize=(13, 3.5))
    for ax, vol, title in zip(
        axes,
        [*rec.stack.phases, rec.semantic],
        ["non-contrast", "arterial", "venous", "labels"],
    ):
        img = vol.data[:, :, z].T
        if title == "labels":
            ax.imshow(img, cmap="tab20", interpolation="nearest", vmin=0, vmax=15)
        else:
            ax.imshow(img, cmap="gray", vmin=-20, vmax=180)
        ax.set_title(f"{title} (z={z})")
        ax.axis("off")
    n_lesions = len(rec.instances)
    fig.suptitle(f"cohort={cohort}  lesions={n_lesions}  labels={rec.patient_labels.tolist()}")
    fig.tight_layout()
    path = out_dir / f"{cohort}.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    print(f"wrote {path}")
    for inst in rec.instances:
        print(
            f"  lesion id={inst.id} type={inst.type_id} voxels={inst.voxel_count} "
            f"radius={inst.effective_radius_mm:.1f} mm"
        )
