"""SUMNet: encoder-decoder segmentation of ultrasound frames on a numpy autodiff core."""
