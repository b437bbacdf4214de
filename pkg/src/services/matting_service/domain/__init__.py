# Matting service domain layer
