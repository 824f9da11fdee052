"""
Tissue detection and patch tiling
=================================

Paint a toy slide, detect its tissue, and enumerate the 340x340 patch
grid — first with the non-overlapping training stride, then with the
overlapping stride used for heatmaps.
"""
# %%
# Build a toy slide: a white canvas with one tissue strip and a small
# anomalous region inside it.
from histoanomaly.synth import RasterLayout, gen_raster
from histoanomaly.tiler import TileSpec, detect_tissue, enumerate_patches

layout = RasterLayout(width=1360, height=680, slide_id="demo", rectangles=[
    {"kind": "tissue", "x": 0, "y": 0, "w": 1360, "h": 680},
    {"kind": "anomaly", "x": 400, "y": 100, "w": 300, "h": 300},
])
raster, truth_mask, annotations = gen_raster(layout)
print(f"slide {raster.id}: {raster.width}x{raster.height}, "
      f"{len(annotations)} annotated region(s)")

# %%
# Tissue detection: HSV thresholding (saturated, not too bright) plus one
# pass of 3x3 majority smoothing. On this synthetic slide it recovers the
# painted tissue exactly.
mask = detect_tissue(raster)
agreement = (mask.bits == truth_mask.bits).mean()
print(f"detected tissue fraction: {mask.bits.mean():.3f} "
      f"(agreement with ground truth: {agreement:.4f})")

# %%
# Training grid: patch 340, stride 340, background filter at 80%.
coords = enumerate_patches(mask, TileSpec(), slide_id=raster.id)
print(f"training grid: {len(coords)} patches")
print("first three:", [(c.x, c.y) for c in coords[:3]])

# %%
# Heatmap grid: stride 265 so horizontally adjacent patches overlap by
# exactly 75 pixels.
heatmap_spec = TileSpec.for_heatmap()
overlap = heatmap_spec.patch_size - heatmap_spec.stride
coords_hm = enumerate_patches(mask, heatmap_spec, slide_id=raster.id)
print(f"heatmap grid: {len(coords_hm)} patches (overlap {overlap} px)")

# %%
# The grid is analytic for a fully-tissue slide:
# (floor((W-P)/S)+1) * (floor((H-P)/S)+1).
p, s = heatmap_spec.patch_size, heatmap_spec.stride
expected = ((raster.width - p) // s + 1) * ((raster.height - p) // s + 1)
assert len(coords_hm) == expected
print(f"matches the closed-form count: {expected}")
