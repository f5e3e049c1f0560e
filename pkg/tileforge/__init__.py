"""
tileforge - preprocessing, anchor optimization and evaluation toolkit
for small-defect detection on large grayscale scans.
"""

__version__ = "0.3.0"
