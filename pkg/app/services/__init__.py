# Scene, rendering, reconstruction, features, network, fusion and pipeline services
