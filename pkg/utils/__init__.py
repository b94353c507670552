# Utils package for the IPU even-coding toolkit
