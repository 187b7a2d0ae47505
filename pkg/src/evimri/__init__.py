"""Unpaired two-domain MRI translation and uncertainty-aware lesion classification.

Stage 1 translates volumetric grayscale images between two acquisition
domains with a mask-constrained adversarial-consistency GAN.  Stage 2
trains a binary classifier whose head emits Dirichlet evidence, optimized
with an evidential focal loss, and uses the resulting per-sample
uncertainty to filter training data and to abstain at deployment time.
"""

__version__ = "0.1.0"
