# Clip samples and augmentation configs
