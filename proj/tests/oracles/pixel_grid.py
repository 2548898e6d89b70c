# Camera-frame ray directions for a 4x4 sensor, fx=fy=2, cx=cy=1.5.
import numpy as np

fx = fy = 2.0
cx = cy = 1.5
for v in range(4):
    for u in range(4):
        d = np.array([(u - cx) / fx, -(v - cy) / fy, -1.0])
        d /= np.linalg.norm(d)
        print("{%.17g, %.17g, %.17g}," % tuple(d))
