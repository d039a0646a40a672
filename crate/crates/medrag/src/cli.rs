// CLI command implementations; see main.rs.
