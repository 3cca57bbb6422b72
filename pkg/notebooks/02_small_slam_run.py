# %% [markdown]
# # A short SLAM run on the synthetic room
#
# Forty frames in deterministic mode. The run writes its trajectory, checkpoint and per-frame
# metrics to ``out/notebook_run``; the last cell renders the map at the final estimated pose.

# %%
import numpy as np
from PIL import Image

from covslam.config import config_from_dict
from covslam.pipeline import Slam
from covslam.render import render

cfg = config_from_dict({"max_frames": 40, "out": "out/notebook_run"})
slam = Slam(cfg)
report = slam.run()
slam.save(report, cfg.out)
print(report.summary())

# %%
kinds = [k for _, k in report.keyframes]
print("tracking keyframes:", kinds.count("tracking_keyframe"), " mapping-only:", kinds.count("mapping_only"))
print("primitives over time:", [n for _, n in report.primitive_history[::5]])

# %%
pose = slam.tracker.poses[-1]
frame = render(slam.gmap.gaussians, pose, slam.K_render)
Image.fromarray((np.clip(frame.rgb, 0, 1) * 255).astype(np.uint8)).save("out/notebook_run/last_view.png")
print("held-out PSNR", report.psnr_heldout)
