import numpy as np
def heuristics(distance_matrix):
    num_nodes = distance_matrix.shape[0]
    
    # Average Distance and Connectivity
    avg_distances = np.mean(distance_matrix, axis=1)
    local_connectivity = np.sum(distance_matrix, axis=1) / (num_nodes - 1)
    global_connectivity = np.sum(distance_matrix) / (num_nodes * (num_nodes - 1))
    
    # Adaptive Shortcut Factor
    adaptive_shortcut_factor = np.maximum(avg_distances, 0.5) / np.max(avg_distances)
    
    # Hierarchical Complexity
    hierarchical_complexity = np.sum(distance_matrix ** 2, axis=1)
    
    # Node Importance Factor
    node_importance = np.sum(distance_matrix, axis=1)
    
    # Dynamic Influence
    influence_factor = 1 / (1 + np.exp(-distance_matrix / 10))  # Gaussian decay
    
    # Local and Global Connectivity Adjustment
    local_density = 1 / np.sum(distance_matrix ** 2, axis=1)
    local_connectivity_factor = np.minimum(1, np.exp(-local_density))  # Adjusted for local node importance
    
    # Novel Dynamic Decay: Adaptive Local Density Adjustment
    # This factor gives more weight to less densely connected nodes
    local_density_factor = np.minimum(1, 1 / local_connectivity)
    
    # Popularity Factor
    popularity_factor = np.sum(np.power(distance_matrix, 2), axis=1) / np.sum(distance_matrix, axis=1)
    
    # Novel Factor: Edge-wise Connectivity
    edge_connectivity = np.copy(distance_matrix)
    for k in range(num_nodes):
        edge_connectivity[k] = np.sum(distance_matrix[k]) / (num_nodes - 1)
    
    # High-Degree Weight
    high_degree_weight = 0.5  # Adjusted to emphasize high-degree nodes
    heuristic_matrix = (distance_matrix ** 2) * (1 - avg_distances) * (1 - adaptive_shortcut_factor) \
                        * (1 - hierarchical_complexity) * (1 - node_importance) * high_degree_weight \
                        * np.maximum(avg_distances, 0.5)  # Favor high-degree nodes
    
    # Time Stability Factor
    time_stability = np.exp(-distance_matrix / 100)  # Adjusted for edges with larger time differences
    heuristic_matrix *= time_stability
    
    # Novel Factor: Edge-wise Connectivity
    # This factor considers local centrality diversity and edge-wise connectivity
    edge_diversity = np.abs(np.minimum(local_connectivity, edge_connectivity) \
                    - np.maximum(local_connectivity, edge_connectivity))
    edge_connectivity_factor = 1 - edge_diversity
    
    # Combine all factors
    heuristic_matrix *= (1 - local_density_factor) - influence_factor - popularity_factor \
                        - edge_connectivity_factor - time_stability
    
    # Normalization to ensure the heuristic matrix values sum to 1 for each row (each edge)
    heuristic_matrix /= np.sum(heuristic_matrix, axis=1)[:, np.newaxis]
    
    # Add a novel factor: Temporal Stability Factor
    temporal_stability = np.exp(-distance_matrix / 1000)  # Adjusted for edges with older time differences
    heuristic_matrix *= temporal_stability
    
    return heuristic_matrix

