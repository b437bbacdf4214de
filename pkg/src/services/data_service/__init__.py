# Clip data: compositing, augmentation, synthesis and frame I/O
