"""Knowledge-base-guided contrastive training and semantic coding at desk scale.

Submodules:
    pqkb: product-quantized knowledge bases with ADC search and a binary file format.
    fusion: query perturbation, retrieval and cross-attention fusion.
    dcl: decoupled contrastive loss and its gradient.
    stage1: contrastive encoder training, linear probe, private knowledge bases.
    semcodec: VQ codec, bit-flip channel and decoder training.
    kbnet: TCP serving of knowledge bases and the two-device transfer demo.
    cli: the ``crlsc`` command.
"""

__version__ = "0.1.0"
