# Matting network, guided-filter refinement and checkpoint container
