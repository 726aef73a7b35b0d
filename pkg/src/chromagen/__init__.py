"""Grayscale-to-color generative models on CIFAR-10: CNN, CVAE, CWGAN-GP, AGE and IVAE."""

__version__ = "0.1.0"
