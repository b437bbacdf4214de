# Clip compositing, augmentation, synthesis and frame I/O
