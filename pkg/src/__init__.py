# Recurrent video matting engine
# Layered services over a shared tensor core
