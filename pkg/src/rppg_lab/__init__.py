"""rppg_lab: masked-autoencoder pre-training for remote photoplethysmography
on spatio-temporal maps, with synthetic ground-truth benchmarks.

Submodules:
  synthgen   - synthetic BVP + ROI trace generation
  dsp        - resampling, band-pass, Pearson, PSD kernels
  chroma     - GREEN / CHROM / POS projections, RGB->YUV
  stmap      - STMap variants, masking, patchify, file formats
  nn         - autodiff tensor core, ViT encoder/decoder, AdamW
  objectives - reconstruction and fine-tuning losses
  pipeline   - training/evaluation protocols, HR/HRV/RF estimation
  cli        - command-line interface
"""

__version__ = "0.1.0"
