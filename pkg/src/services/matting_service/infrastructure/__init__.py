# Matting service infrastructure layer
