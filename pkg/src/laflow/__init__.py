"""Left-atrial 4D flow MRI analysis."""
